import numpy as np

from cloudseg import raster


def write_dataset(directory, patches):
    """patches: list of (band stack (B,H,W), mask or None, scene_id).
    Writes CSEG files + manifest, returns the records."""
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (bands, mask, scene_id) in enumerate(patches):
        pid = f"p{i:03d}"
        band_paths = []
        for b in range(bands.shape[0]):
            name = f"{pid}_b{b}.cseg"
            raster.save_tensor(bands[b], directory / name)
            band_paths.append(name)
        mask_path = None
        if mask is not None:
            mask_path = f"{pid}_gt.cseg"
            raster.save_tensor(np.asarray(mask, dtype=np.uint8), directory / mask_path)
        records.append({
            "patch_id": pid, "scene_id": scene_id, "band_paths": band_paths,
            "mask_path": mask_path, "grid_row": 0, "grid_col": 0,
        })
    raster.write_manifest(records, directory / "manifest.jsonl")
    return records


def finite_difference_check(model, x, loss_fn, rng, samples_per_param=4, eps=1e-5):
    """Central-difference check of every parameter tensor of ``model``.

    loss_fn(logits) -> (loss, grad_logits). Returns the worst relative
    error over sampled entries; the denominator has a small absolute
    floor so exactly-zero gradients (e.g. conv biases absorbed by the
    following instance norm) compare on FD roundoff noise fairly.
    """
    logits = model.forward(x)
    _, grad_logits = loss_fn(logits)
    analytic = {k: v.copy() for k, v in model.backward(grad_logits).items()}
    params = model.parameters()
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = rng.integers(0, flat.size, size=min(samples_per_param, flat.size))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(model.forward(x))[0]
            model._forward_valid = False
            flat[i] = orig - eps
            lm = loss_fn(model.forward(x))[0]
            model._forward_valid = False
            flat[i] = orig
            numeric = (lp - lm) / (2 * eps)
            ana = analytic[name].reshape(-1)[i]
            diff = abs(numeric - ana)
            if diff < 1e-6:
                continue  # exact-zero gradients vs FD roundoff noise
            worst = max(worst, diff / (abs(numeric) + abs(ana)))
    return worst
