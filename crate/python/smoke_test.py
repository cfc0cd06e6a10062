"""Exercises the Python bindings on a small synthetic world.

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import random
import tempfile
from pathlib import Path

import impactscan_py as isc


def crater_patch(size, radius):
    rng = random.Random(1)
    c = (size - 1) / 2
    px = []
    for r in range(size):
        for col in range(size):
            d = math.hypot(r - c, col - c)
            px.append((0.25 if d < radius else 0.5) + rng.gauss(0, 0.01))
    return px


def main():
    cfg = isc.PipelineConfig.demo()
    cfg.n_sites = 150
    cfg.k = 40
    cfg.per_bin = 4
    cfg.world_seed = 11
    cfg.validate()
    assert isc.PipelineConfig(cfg.to_toml()).to_toml() == cfg.to_toml()

    f = isc.features(crater_patch(300, 30), 300, 300)
    assert len(f) == 5 and f[2] < 0, f

    assert isc.transition_allowed("unreviewed", "new_fresh")
    assert not isc.transition_allowed("unreviewed", "confirmed")
    assert abs(isc.kl_divergence([0.5, 0.5], [0.5, 0.5])) < 1e-12
    assert abs(isc.effective_diameter([10.0]) - 10.0) < 1e-9
    assert isc.ece([0.9, 0.1], [True, False]) < 0.11

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        out = isc.run_synthetic(cfg, tmp / "candidates.jsonl")
        print(
            f"{out['n_observations']} observations, {out['windows_scored']} windows, "
            f"{out['n_candidates']} candidates"
        )
        top, strat = out["top_k"]["d_kl"], out["stratified"]["d_kl"]
        print(f"D_KL top_k={top:.4f} stratified={strat:.4f}")
        assert strat < top

        cands = isc.read_candidates(tmp / "candidates.jsonl")
        assert len(cands) == out["n_candidates"] > 0
        cat = isc.Catalog.create(tmp / "review", tmp / "candidates.jsonl", cfg.bin_edges)
        cid = cands[0]["id"]
        for status in ["new_fresh", "followup_requested", "confirmed"]:
            cat.decide(cid, status, "smoke")
        try:
            cat.decide(cid, "unreviewed", "smoke")
            raise AssertionError("illegal transition accepted")
        except ValueError:
            pass
        entry = cat.promote(cid, {"crater_type": "single", "diameters": [12.0]})
        assert entry["impact_id"] == "I0001", entry
        assert len(isc.Catalog.open(tmp / "review").history(cid)) == 3
    print("smoke test passed")


if __name__ == "__main__":
    main()
