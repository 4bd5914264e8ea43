"""A marketplace for compute cycles: jobs go to the lowest-bidding cluster,
payment settles through escrow, and a deterministic harness simulates the
whole market in virtual time."""

__version__ = "0.1.0"
