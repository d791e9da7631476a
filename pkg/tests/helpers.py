from rsdet.config import RunConfig
from rsdet.datapipe import synth_shapes
from rsdet.detectors import build_detector

# filled by the acceptance tests, printed by the terminal summary hook
ACCEPTANCE_LINES: list[str] = []


def tiny_run_config(family="retinanet_rs", resolution=128, batch_size=2, epochs=2, **model):
    opts = dict(width_multiplier=0.125, fpn_width=16, head_width=16, fc_width=32, resolution=resolution)
    opts.update(model)
    return RunConfig.from_dict({
        "family": family, "scale": 1, "model": opts,
        "recipe": {"batch_size": batch_size, "epochs": epochs, "warmup_epochs": 0.5, "base_lr": 0.01,
                   "sd_init": 0.1},
        "dataset": {"kind": "synth", "num_images": 2 * batch_size, "image_size": resolution},
    })


def tiny_detector(family="retinanet_rs", resolution=128, **model):
    cfg = tiny_run_config(family, resolution, **model)
    return build_detector(cfg.detector_config(2)), cfg


def tiny_dataset(n=4, size=128, seed=0):
    return synth_shapes(n, seed=seed, image_size=size, size_range=(24, 64))
