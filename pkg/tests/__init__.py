# Fus-MAE Test Suite
