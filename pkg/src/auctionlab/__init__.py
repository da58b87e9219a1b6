"""auctionlab: a multi-slot ad auction laboratory.

Learned list-wise mechanisms with externality-aware CTR prediction,
classical baselines (GFP/GSP/VCG/WVCG), a synthetic click environment,
and an incentive-compatibility regret test bench.
"""

from auctionlab._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
