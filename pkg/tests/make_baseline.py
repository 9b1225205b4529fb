"""Regenerate tests/data/scenario_lt10_baseline.json.

The detections come from the package (simulator and fusion); every AP number
is computed by the brute-force evaluator in ``oracles.py``.

    python3 tests/make_baseline.py
"""

import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

from oracles import oracle_class_means  # noqa: E402

from lt3d.fusion import mmlf_fuse, tune_fusion_calibration  # noqa: E402
from lt3d.synth import ScenarioConfig, simulate  # noqa: E402
from lt3d.taxonomy import group_by_cardinality  # noqa: E402

SCENARIO = HERE.parent / "src" / "lt3d" / "data" / "scenario_lt10.json"
OUT = HERE / "data" / "scenario_lt10_baseline.json"
VALIDATION_SEED = 1007
VALIDATION_FRAMES = 150


def tune_on_validation(cfg):
    """Calibration tables tuned on a held-out seed of the same scenario."""
    val = cfg.with_(seed=VALIDATION_SEED, n_frames=VALIDATION_FRAMES)
    vgt, vlid, vrgb = simulate(val)
    return tune_fusion_calibration(vlid, vrgb, val.cameras, vgt, val.taxonomy)


def run_protocol(cfg):
    """Test-split GT, LiDAR-only detections, MMLF detections and the tuned tables."""
    calib_lidar, calib_rgb = tune_on_validation(cfg)
    gt, lidar, rgb = simulate(cfg)
    fused = mmlf_fuse(lidar, rgb, cfg.cameras, calib_lidar, calib_rgb)
    return gt, lidar, rgb, fused, (calib_lidar, calib_rgb)


def summarize(class_ap, taxonomy):
    groups = {c: g.value for c, g in group_by_cardinality(taxonomy).items()}
    out = {"class_ap": class_ap}
    defined = [v for v in class_ap.values() if v is not None]
    out["mAP"] = sum(defined) / len(defined)
    for name in ("Many", "Medium", "Few"):
        vals = [v for c, v in class_ap.items() if groups[c] == name and v is not None]
        out[name] = sum(vals) / len(vals)
    return out


def main():
    cfg = ScenarioConfig.load(SCENARIO)
    gt, lidar, _, fused, _ = run_protocol(cfg)
    payload = {
        "scenario": SCENARIO.name,
        "validation_seed": VALIDATION_SEED,
        "validation_frames": VALIDATION_FRAMES,
        "lidar_only": summarize(oracle_class_means(lidar, gt, cfg.taxonomy), cfg.taxonomy),
        "mmlf": summarize(oracle_class_means(fused, gt, cfg.taxonomy), cfg.taxonomy),
    }
    OUT.write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps({k: {g: v[g] for g in ("mAP", "Many", "Medium", "Few")}
                      for k, v in payload.items() if isinstance(v, dict)}, indent=2))


if __name__ == "__main__":
    main()
