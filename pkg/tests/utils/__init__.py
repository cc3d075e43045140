# Test utilities for Fus-MAE
