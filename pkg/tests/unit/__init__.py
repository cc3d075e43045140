# Unit tests for Fus-MAE
