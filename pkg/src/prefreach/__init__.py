"""Preference-based reward learning from point-cloud observations.

Pipeline: render partial-view clouds -> pre-train a point-cloud autoencoder
-> collect suboptimal demonstrations as embedding+end-effector trajectories
-> rank them and build pairwise preferences -> fit a reward net to the
preferences -> optimize a policy against it with PPO.
"""

__version__ = "0.1.0"
