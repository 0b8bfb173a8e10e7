"""RL-guided economic MPC for a lettuce greenhouse."""
