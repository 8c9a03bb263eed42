"""Next-best-view selection for 3D Gaussian splatting via optimal experimental design."""
from .gradients import ViewJacobian, image_vjp, l1_gradient, view_jacobian
from .infogain import (
    A_OPT,
    D_OPT,
    E_OPT,
    FISHER_RF,
    LAMBDA_PRIOR,
    T_OPT,
    HessianApprox,
    SelectionReport,
    UncertaintyFunctional,
    accumulate_hessian,
    score_candidate,
    select_batch,
    select_keyframes,
    select_next_view,
    uncertainty,
)
from .metrics import psnr, ssim
from .optimize import LRConfig, Trainer, init_scene, train
from .render import composite, project, render
from .scene import FULL_MASK, CameraView, Gaussian, Image, ParamMask, Scene, look_at

__version__ = "0.1.0"

__all__ = [
    "A_OPT", "D_OPT", "E_OPT", "FISHER_RF", "FULL_MASK", "LAMBDA_PRIOR", "T_OPT",
    "CameraView", "Gaussian", "HessianApprox", "Image", "LRConfig", "ParamMask", "Scene",
    "SelectionReport", "Trainer", "UncertaintyFunctional", "ViewJacobian",
    "accumulate_hessian", "composite", "image_vjp", "init_scene", "l1_gradient", "look_at",
    "project", "psnr", "render", "score_candidate", "select_batch", "select_keyframes",
    "select_next_view", "ssim", "train", "uncertainty", "view_jacobian",
]
