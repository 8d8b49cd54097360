"""Self-supervised visual servoing on a simulated low-rigidity arm.

A recurrent predictor with a small learnable regime vector (parametric
bias) learns the arm's sensorimotor law from data the robot collects by
placing and re-picking objects itself.  The same vector is re-estimated
online to track changes of the body (joint offsets, camera shifts).
"""

__version__ = "0.1.0"
