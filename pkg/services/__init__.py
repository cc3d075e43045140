# Services package for Fus-MAE