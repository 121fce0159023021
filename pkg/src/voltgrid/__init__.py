"""voltgrid: AC power flow, episode scenario sampling, and reinforcement
learning for transmission voltage control."""

__version__ = "0.1.0"
