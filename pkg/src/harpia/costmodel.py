"""Closed-form storage and traffic estimates.

All sizes come from the real serializers so the simulator's byte counts
can be checked against these formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Union

from harpia import dpifa, musig, settlement
from harpia.merkle import HASH_SIZE, next_power_of_two

KEY_SIZE = 33
MIB = 2**20

# per-signer MuSig traffic: commitment, public nonce, partial signature
MUSIG_BYTES_PER_SIGNER = musig.COMMITMENT_SIZE + musig.NONCE_SIZE + musig.PARTIAL_SIZE


@dataclass(frozen=True)
class CostInputs:
    n: int
    zeta: Union[int, float, str] = 75
    nu: Union[int, float, Fraction] = 5
    lam: int = 600  # seconds
    cycle_seconds: int = 86_400

    def __post_init__(self) -> None:
        if self.n < 1 or self.lam <= 0 or self.cycle_seconds < 0 or self.nu < 0:
            raise ValueError("cost inputs must be positive")
        musig.threshold_m(self.n, self.zeta)  # validates zeta

    @property
    def periods(self) -> int:
        return self.cycle_seconds // self.lam


def combo_count(n: int, zeta: Union[int, float, str]) -> int:
    m = musig.threshold_m(n, zeta)
    return sum(math.comb(n, k) for k in range(m, n + 1))


def musig_storage_bytes(n: int, zeta: Union[int, float, str]) -> int:
    """Keys plus tree hashes, counting 2C - 1 nodes for C keys."""
    c = combo_count(n, zeta)
    return KEY_SIZE * c + HASH_SIZE * (2 * c - 1)


def musig_storage_bytes_as_built(n: int, zeta: Union[int, float, str]) -> int:
    """Same, for the tree actually built (leaves padded to a power of two)."""
    p = next_power_of_two(combo_count(n, zeta))
    return KEY_SIZE * p + HASH_SIZE * (2 * p - 1)


def dpifa_storage_bytes(inputs: CostInputs) -> int:
    """Report bytes per cycle: one 116-byte report per router and neighbor per period."""
    nu = min(Fraction(inputs.nu), inputs.n - 1)
    total = dpifa.REPORT_SIZE * nu * inputs.n * inputs.periods
    if total.denominator != 1:
        raise ValueError("nu * n must be an integer number of directed links")
    return int(total)


def dpifa_extension_bytes(inputs: CostInputs) -> int:
    nu = min(Fraction(inputs.nu), inputs.n - 1)
    return int(dpifa.EXTENSION_SIZE * nu * inputs.n * inputs.periods)


def settlement_overhead_bytes(n: int, proposers: Optional[int] = None, signers: Optional[int] = None) -> Dict[str, int]:
    """Per-cycle STP, acknowledgement, announcement and MuSig bytes.

    Every proposer broadcasts its STP, every other member acknowledges each
    one, and the winning proposer announces the co-signers and runs MuSig
    with them (``signers`` includes the proposer; default all members).
    """
    proposers = n if proposers is None else proposers
    signers = n if signers is None else signers
    return {
        "stp": proposers * settlement.stp_size(n),
        "confirmations": proposers * (n - 1) * settlement.CONFIRMATION_SIZE,
        "announcement": settlement.announcement_size(signers - 1),
        "musig": signers * MUSIG_BYTES_PER_SIGNER,
    }


def cycle_traffic_bytes(inputs: CostInputs, proposers: Optional[int] = None, signers: Optional[int] = None) -> int:
    overhead = settlement_overhead_bytes(inputs.n, proposers, signers)
    return dpifa_storage_bytes(inputs) + sum(overhead.values())


def format_mib(nbytes: int) -> str:
    return f"{nbytes / MIB:.2f} MiB"


def estimate(inputs: CostInputs) -> Dict[str, object]:
    """Everything the ``cost-estimate`` command prints."""
    overhead = settlement_overhead_bytes(inputs.n)
    return {
        "n": inputs.n,
        "zeta": str(inputs.zeta),
        "m": musig.threshold_m(inputs.n, inputs.zeta),
        "combinations": combo_count(inputs.n, inputs.zeta),
        "musig_storage_bytes": musig_storage_bytes(inputs.n, inputs.zeta),
        "musig_storage_bytes_as_built": musig_storage_bytes_as_built(inputs.n, inputs.zeta),
        "dpifa_storage_bytes": dpifa_storage_bytes(inputs),
        "dpifa_extension_bytes": dpifa_extension_bytes(inputs),
        "settlement_overhead_bytes": sum(overhead.values()),
        "cycle_traffic_bytes": cycle_traffic_bytes(inputs),
    }
