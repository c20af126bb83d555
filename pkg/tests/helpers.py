"""Small shared builders for model-level tests."""

from skeleton_ood.backbone import BackboneConfig
from skeleton_ood.checkpoint import Checkpoint
from skeleton_ood.energy import DetectorState, EnergyConfig
from skeleton_ood.fusion import HeadConfig
from skeleton_ood.graph import load_hierarchy
from skeleton_ood.model import ModelConfig, SkeletonOODModel


def tiny_model(rng, hierarchy="toy11", k=3, ash="p", fusion=True, extra=1, in_channels=3):
    h = load_hierarchy(hierarchy)
    backbone = BackboneConfig(in_channels, (4, 6), (1, 2), 3)
    head = HeadConfig(feature_dim=backbone.feature_dim, num_classes=k, extra_dims=extra, ash=ash,
                      fusion=fusion, mlp_hidden=8, fused_dim=5)
    return SkeletonOODModel.init(ModelConfig(tuple(h.parent), backbone, head), rng)


def tiny_checkpoint(rng, tau=0.5, **kw):
    model = tiny_model(rng, **kw)
    detector = DetectorState(tau, 20, model.num_seen, EnergyConfig())
    return Checkpoint(model, detector, {"note": "test", "value": float(rng.normal())})
