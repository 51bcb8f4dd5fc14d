# Robust mean-field LQG game solver
__version__ = "1.0.0"
