"""File outputs: binary PPM images, RFC-4180 CSV logs, raw float blobs.

Everything here is deterministic: fixed float formatting (repr), fixed
byte layouts, no timestamps.
"""

import csv
import json

import numpy as np

from .errors import ConfigurationError


def write_ppm(path, image):
    """Binary PPM (P6, 8-bit); linear clamp of [0,1] floats to [0,255]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    px = np.clip(image, 0.0, 1.0)
    px = np.rint(px * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.transpose(1, 2, 0).tobytes())


def write_trajectory_csv(path, traj):
    """Rows (step, t, var, dim0..dimN) for var in {x, xc, xgt}.

    Only defined for single-sample trajectories (state shape (d,))."""
    if traj.xs.ndim != 2:
        raise ConfigurationError("trajectory CSV export needs an unbatched run")
    d = traj.xs.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "t", "var"] + [f"dim{i}" for i in range(d)])
        for i, t in enumerate(traj.ts):
            for name, arr in (("x", traj.xs), ("xc", traj.x_clean),
                              ("xgt", traj.x_gt)):
                wr.writerow([i, repr(float(t)), name]
                            + [repr(float(v)) for v in arr[i]])


def write_distill_log_csv(path, dlog):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tau", "t", "loss_proxy", "residual_norm", "theta_norm"])
        for i in range(len(dlog.taus)):
            wr.writerow([int(dlog.taus[i]), repr(float(dlog.ts[i])),
                         repr(float(dlog.loss_proxy[i])),
                         repr(float(dlog.residual_norm[i])),
                         repr(float(dlog.theta_norm[i]))])


def write_blob(path_prefix, array, meta=None):
    """Little-endian float32 blob with a JSON sidecar describing the shape."""
    arr = np.asarray(array, dtype=np.float64)
    arr.astype("<f4").tofile(path_prefix + ".f32")
    desc = {"shape": list(arr.shape), "dtype": "<f4"}
    if meta:
        desc.update(meta)
    with open(path_prefix + ".json", "w") as fh:
        json.dump(desc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_blob(path_prefix):
    with open(path_prefix + ".json") as fh:
        desc = json.load(fh)
    arr = np.fromfile(path_prefix + ".f32", dtype="<f4").astype(np.float64)
    return arr.reshape(desc["shape"])


def read_raw_f32(path):
    """Flat little-endian float32 file (image-sized mixture means)."""
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
