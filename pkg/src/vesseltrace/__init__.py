"""vesseltrace: sequential tracing and segmentation of branched tubular
structures in 3D image volumes.

Starting from a single seed point with a direction and radius estimate, the
tracer repeatedly segments radius-scaled local subvolumes, extracts local
centerlines by fast marching, steps along the vessel, queues bifurcations,
and fuses all local predictions into one connected global segmentation and
surface mesh. Local segmentation is a pluggable backend, so the engine can
run against analytic oracles on synthetic phantoms.
"""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    Volume3D,
    SubvolumeSpec,
    ForegroundStats,
    EmptyCropError,
    load_volume,
    save_volume,
    extract_subvolume,
    resample_to_grid,
    normalize_zscore,
    normalize_ct_foreground,
    compute_foreground_stats,
    distance_transform,
    largest_connected_component,
)
from .phantom import (  # noqa: F401
    Branch,
    PhantomTree,
    PhantomConfig,
    generate_tree,
    rasterize_phantom,
    phantom_ground_truth,
)
from .segmenter import (  # noqa: F401
    SegmentationFailure,
    PatchSampleParams,
    segment,
    oracle_gtcrop,
    oracle_threshold,
    external_backend,
    sample_training_patches,
    evaluate_loss,
)
from .surface import TriMesh, marching_cubes, smooth_windowed_sinc, save_mesh, load_mesh  # noqa: F401
from .centerline import (  # noqa: F401
    Cap,
    CenterlinePath,
    CenterlineExtractionFailure,
    BacktraceFailure,
    detect_caps,
    select_source,
    solve_eikonal,
    backtrace_path,
    extract_local_centerlines,
    save_centerlines,
    load_centerlines,
)
from .tracer import (  # noqa: F401
    StepPoint,
    TraceConfig,
    TraceResult,
    subvolume_size,
    segment_with_enlargement,
    choose_step_points,
    chance_advance,
    check_retrace,
    trace,
)
from .assembly import GlobalAccumulator, gaussian_weight_map, accumulate, finalize  # noqa: F401
from .metrics import (  # noqa: F401
    MetricsReport,
    dice,
    hausdorff,
    centerline_overlap,
    eval_mask,
    wilcoxon_signed_rank,
)
