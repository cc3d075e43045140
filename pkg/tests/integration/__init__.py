# Integration tests for Fus-MAE
