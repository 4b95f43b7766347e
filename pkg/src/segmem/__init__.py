"""segmem: segment-level memory caching for recurrent sequence models.

Recurrent memory modules compress a sequence into a fixed-size state.  This
package snapshots that state at segment boundaries and lets every later
token retrieve from all snapshots, with a choice of aggregation strategies
(plain residual sum, gated residual, parameter-space souping, and sparse
top-k selection), two caching modes (running checkpoints or independent
per-segment compressors), constant or binary-decomposition segment plans,
and instrumentation for the compute/recall trade-off this buys.
"""

from . import segmentation, tensor
from .memory import MemoryArch, MemoryState, InnerHyperparams
from .segmentation import SegmentPlan, constant_plan, logarithmic_plan

__version__ = "0.1.0"
