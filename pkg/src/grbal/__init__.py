"""Model-based meta-learning for online adaptation (GrBAL / ReBAL).

A dynamics-model prior is meta-trained so that adapting it on the most
recent M transitions gives accurate predictions for the next K; the adapted
model drives sampling-based MPC.
"""

__version__ = "0.1.0"
