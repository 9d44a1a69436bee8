from .annotations import (
    AnnotatedImage,
    AnnotationError,
    DatasetIndex,
    KeypointAnnotation,
    Modality,
    dump_index,
    load_annotations,
    norm_to_pixel,
    pixel_to_norm,
)
from .augment import Jitter, sample_jitter
from .auxiliary import (
    AuxiliaryKeypoint,
    SaliencyMask,
    auxiliary_arrays,
    bbox_mask,
    generate_auxiliary_keypoints,
    load_saliency,
)
from .edgemaps import CacheMiss, Detector, cache_path, canny, synthesize_edgemap
from .episodes import Episode, ImageStore, SamplingError, sample_episode, split_images, support_views
