"""Automatic cardiac landmark localization and view computation.

Two 3D encoder/decoder networks run in sequence: the first segments a
tight box around the heart, the second regresses one heatmap per
landmark inside the cropped cube. The six decoded landmarks define the
2/3/4-chamber planes and the short-axis stack, rendered by multiplanar
reformation. Synthetic phantoms provide deterministic training data and
ground truth at desk scale.
"""

from .volume import (
    AffineTransform,
    LandmarkId,
    LandmarkSet,
    Series4D,
    Volume3,
    resample_isotropic,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)
from .mvol import read_landmarks, read_mvol, write_landmarks, write_mvol
from .prep import PrepConfig, preprocess
from .enet3d import ENet3d, NetConfig, build_net
from .augment import AugConfig, augment_sample, elastic_field
from .localize import (
    BBox,
    HeatmapStack,
    crop_resize,
    decode_peaks,
    encode_heatmaps,
    landmark_errors,
    mask_to_bbox,
    temporal_median,
)
from .views import PlaneSpec, SaxParams, plane_2ch, plane_3ch, plane_4ch, render_plane, sax_stack
from .phantom import PhantomParams, Study, generate_phantom, load_dataset, phantom_dataset, write_dataset
from .pipeline import (
    SearchSpec,
    SplitSpec,
    TrainConfig,
    evaluate,
    hyperparam_search,
    infer_study,
    emit_views,
    split_patients,
    train_bbox,
    train_landmarks,
)

__version__ = "0.1.0"
