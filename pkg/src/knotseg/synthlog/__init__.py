"""Synthetic logs: contour slices with branch scars and the knots behind them."""
from .dataset import (
    FOLDS,
    GeneratorConfig,
    Manifest,
    TreeRecord,
    generate_dataset,
    generate_tree,
    iter_fold_counts,
    read_manifest,
    tree_seed,
    write_manifest,
)
from .geometry import (
    DISTORTED,
    FIR,
    PROFILES,
    SPECIES,
    SPRUCE,
    BranchSpec,
    LogSpec,
    Raster,
    SpeciesProfile,
    get_profile,
    knot_disc,
    render_slice,
    render_stack,
    sample_log_spec,
)
from .volume_io import VolumeSample, decode_volume, encode_volume, read_volume, write_volume
