"""Channel-wise merging of fine-tuned expert checkpoints.

Experts fine-tuned from a shared base are clustered per output channel,
merged into K group checkpoints, and reconstructed on demand by gathering
rows according to per-expert index tensors. A hashed-feature router picks
the expert for a query.
"""

__version__ = "0.1.0"

from .analysis import cosine, expert_overlap, similarity_proportions
from .cluster import (
    AssignmentTable,
    ChannelKMeans,
    ClusterSpec,
    assign_random,
    assign_sign,
    build_assignments,
    cluster_rows,
)
from .delta_prune import (
    DeltaPruner,
    DeltaSet,
    PruneSpec,
    apply_prune,
    compute_delta,
    dare_prune,
    make_delta_set,
    ties_prune,
)
from .exceptions import (
    ChannelMergeError,
    CorruptBundleError,
    InvalidParameterError,
    ShapeMismatchError,
    TensorFileError,
)
from .merge import ChannelMerger, MergeSpec, merge, reconstruct, storage_report
from .router import HashedRouter, RouterModel, featurize, route, train_router
from .tensor_io import (
    Checkpoint,
    Manifest,
    MergedBundle,
    load_bundle,
    read_tensor_file,
    save_bundle,
    write_tensor_file,
)
