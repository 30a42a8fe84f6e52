"""Credit-based forwarding incentives for community networks.

Distributed traffic accounting (DPIFA), m-of-n MuSig over secp256k1,
settlement proposals, an emulated settlement contract and a
discrete-event simulator that ties them together.
"""

__version__ = "0.1.0"
