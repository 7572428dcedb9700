"""Training-free recurrent open-vocabulary segmentation engine."""

from .backend import (BackendError, CamBundle, PlantedConcept, ToyBackend,
                      ToySceneSpec, parse_backend, toy_finite_diff_grads)
from .camgen import (AffinityMatrix, BoxMask, box_mask, caa_refine, gradcam,
                     propose_masks, sinkhorn, symmetric_affinity)
from .config import (ConfigError, PipelineConfig, load_bg_set, load_config,
                     preset, save_config, validate_config)
from .core import (BACKGROUND, BinMask, QueryState, SegResult, binarize,
                   load_image_png, load_label_png, resize_bilinear,
                   save_image_png, save_label_png)
from .metrics import (ConfusionAccumulator, DatasetManifest, MetricReport,
                      contour_f, load_manifest, miou, region_j,
                      render_overlay)
from .pipeline import segment_image
from .postproc import (CrfParams, argmax_labels, background_channel,
                       crf_refine, iom, load_proposals, sam_ensemble)
from .prompter import (EmptyMaskError, PromptSpec, apply_visual_prompts,
                       gaussian_blur)
from .protocol import BackendServer, ProtocolError, RemoteBackend
from .recurrence import StepTrace, classify, run, sigma_filter

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND", "AffinityMatrix", "BackendError", "BackendServer",
    "BinMask", "BoxMask", "CamBundle", "ConfigError", "ConfusionAccumulator",
    "CrfParams", "DatasetManifest", "EmptyMaskError", "MetricReport",
    "PipelineConfig", "PlantedConcept", "PromptSpec", "ProtocolError",
    "QueryState", "RemoteBackend", "SegResult", "StepTrace", "ToyBackend",
    "ToySceneSpec", "apply_visual_prompts", "argmax_labels",
    "background_channel", "binarize", "box_mask", "caa_refine", "classify",
    "contour_f", "crf_refine", "gaussian_blur", "gradcam", "iom",
    "load_bg_set", "load_config", "load_image_png", "load_label_png",
    "load_manifest", "load_proposals", "miou", "parse_backend", "preset",
    "propose_masks", "region_j", "render_overlay", "resize_bilinear", "run",
    "sam_ensemble", "save_config", "save_image_png", "save_label_png",
    "segment_image", "sigma_filter", "sinkhorn", "symmetric_affinity",
    "toy_finite_diff_grads", "validate_config",
]
