"""Acceptance suite A1-A9.

Each test carries a ``criterion`` marker; conftest.py prints one PASS/FAIL
line per criterion at the end of the run. A6 and A7 share one desk-scale
run through the CLI (about 12 minutes on a single core).

Run only this suite with ``pytest tests/test_acceptance.py``.
"""
import json
import math
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from ctharmonize import cli
from ctharmonize import pipeline as P
from ctharmonize.ddpm import forward_diffuse, make_schedule, markov_step
from ctharmonize.metrics import ccc
from ctharmonize.nn import (CheckpointFormatError, CheckpointMagicError, CheckpointTruncatedError,
                            CheckpointVersionError, Conv2d, Dense, NetConfig, UNetPP,
                            deep_supervision_loss, grad_check, head_columns, load_checkpoint,
                            save_checkpoint)
from ctharmonize.nn import layers as L
from ctharmonize.phantom import load_pair
from ctharmonize.radiomics import QuantizedROI, glcm_build, glrlm_build, ngtdm_build
from ctharmonize.volume import (BadMagicError, NonFiniteVoxelError, PayloadLengthError, Volume,
                                VersionMismatchError, VolumeFormatError, load_volume, save_volume)
from oracles import ccc_oracle, glcm_oracle, ngtdm_oracle, random_levels, runs_oracle

GRAD_TOL = 1e-3
# small step keeps central differences from straddling leaky-ReLU kinks
FD_STEP = 1e-6


def detail(record_property, text):
    record_property("detail", text)


# ------------------------------------------------------------------ A1

def _fd_layer(forward, backward, x, params=None, seed=0):
    """Max relative error of analytic vs central-difference gradients for one layer."""
    rng = np.random.default_rng(seed)
    dy = None

    def run():
        nonlocal dy
        if params is not None:
            params.zero_grad()
        y, cache = forward(x)
        if dy is None:
            dy = rng.normal(size=y.shape)
        grads = {"x": backward(dy, cache)}
        if params is not None:
            grads.update({k: p.grad.copy() for k, p in params.named_params().items()})
        return float(np.sum(y * dy)), grads

    arrays = {"x": x}
    if params is not None:
        arrays.update({k: p.data for k, p in params.named_params().items()})
    return grad_check(run, arrays, h=FD_STEP).worst


def _concat_self_backward(dy, splits):
    main, extra = L.concat_backward(dy, splits)
    dx = main.copy()
    dx[..., :1] += extra
    return dx


@pytest.mark.criterion("A1", "gradient fidelity")
def test_a1_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x4 = rng.normal(size=(2, 6, 8, 3))
    conv3 = Conv2d(3, 4, rng, 3).astype(np.float64)
    conv1 = Conv2d(3, 4, rng, 1).astype(np.float64)
    dense = Dense(5, 4, rng).astype(np.float64)
    worst = {
        "conv3x3": _fd_layer(conv3.forward, conv3.backward, x4, conv3),
        "conv1x1": _fd_layer(conv1.forward, conv1.backward, x4, conv1),
        "dense": _fd_layer(dense.forward, dense.backward, rng.normal(size=(3, 5)), dense),
        "leaky_relu": _fd_layer(L.leaky_relu, L.leaky_relu_backward, x4),
        "downsample": _fd_layer(lambda x: (L.downsample(x), None), lambda d, _: L.downsample_backward(d), x4),
        "upsample": _fd_layer(lambda x: (L.upsample(x), None), lambda d, _: L.upsample_backward(d), x4),
        "concat": _fd_layer(lambda x: L.concat([x, x[..., :1]]), _concat_self_backward, x4),
        "global_avg_pool": _fd_layer(lambda x: (L.global_avg_pool(x), x.shape),
                                     L.global_avg_pool_backward, x4),
    }
    for arch in ("unetpp", "unet"):
        cfg = NetConfig(depth=3, base_channels=4, latent_dim=8, arch=arch)
        net = UNetPP(cfg, np.random.default_rng(1), np.float64)
        x = rng.uniform(-1, 1, (2, 16, 16, 1))
        target = rng.uniform(-1, 1, x.shape)
        cols = head_columns(cfg)

        def run():
            net.zero_grad()
            _, heads, _, cache = net.forward(x)
            loss, g = deep_supervision_loss([heads[j] for j in cols], target, cfg.supervision_weights)
            grads = {"x": net.backward(dict(zip(cols, g)), cache)}
            grads.update({k: p.grad.copy() for k, p in net.named_params().items()})
            return loss, grads

        worst[f"{arch} L=3 16x16"] = grad_check(run, {"x": x, **net.param_arrays()}, h=FD_STEP).worst
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    detail(record_property, f"max rel err {worst[top]:.2e} ({top}), {elapsed:.1f} s")
    assert all(v <= GRAD_TOL for v in worst.values()), worst
    assert elapsed < 60


# ------------------------------------------------------------------ A2

@pytest.mark.criterion("A2", "pruning equality")
def test_a2_pruning_equality(record_property):
    cfg = NetConfig(depth=4, base_channels=8, latent_dim=16)
    net = UNetPP(cfg, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(20):
        x = rng.uniform(-2, 1, (1, 16, 16, 1)).astype(np.float32)
        _, full, _, _ = net.forward(x)
        for j in head_columns(cfg):
            _, pruned, _, _ = net.forward(x, upto=j)
            assert max(pruned) == j
            assert pruned[j].tobytes() == full[j].tobytes(), j
            checked += 1
    detail(record_property, f"{checked} head comparisons bit-identical")


# ------------------------------------------------------------------ A3

@pytest.mark.criterion("A3", "diffusion consistency")
def test_a3_diffusion_consistency(record_property):
    s = make_schedule()
    t = s.T // 2
    n, dim = 5000, 8
    rng = np.random.default_rng(4)
    z0 = rng.normal(size=dim)
    chain = np.tile(z0, (n, 1))
    for k in range(t + 1):
        chain = markov_step(chain, k, rng.standard_normal(chain.shape), s)
    direct = forward_diffuse(np.tile(z0, (n, 1)), t, rng.standard_normal((n, dim)), s)
    se = np.sqrt(chain.var(axis=0) / n + direct.var(axis=0) / n)
    z_scores = np.abs(chain.mean(axis=0) - direct.mean(axis=0)) / se
    var_ratio = chain.var(axis=0) / direct.var(axis=0)
    # exact alpha_bar invariants
    assert s.alpha_bar[0] == 1.0 - s.beta[0]
    prod = 1.0
    for k in range(s.T):
        prod *= 1.0 - s.beta[k]
        assert s.alpha_bar[k] == prod
    assert np.all(np.diff(s.alpha_bar) < 0) and np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    detail(record_property, f"max |dmean|/SE {z_scores.max():.2f}, var ratio "
                            f"[{var_ratio.min():.3f}, {var_ratio.max():.3f}]")
    assert np.all(z_scores <= 4)
    assert np.all(np.abs(var_ratio - 1) <= 0.10)


# ------------------------------------------------------------------ A4

@pytest.mark.criterion("A4", "CCC oracle")
def test_a4_ccc_oracle(record_property):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        size = int(rng.integers(2, 60))
        a = rng.normal(rng.normal(0, 5), rng.uniform(0.1, 5), size)
        b = rng.uniform(-1, 1) * a + rng.normal(rng.normal(0, 5), rng.uniform(0.1, 5), size)
        c = ccc(a, b)
        worst = max(worst, abs(c - ccc_oracle(list(a), list(b))))
        assert ccc(a, a) == 1.0
        assert ccc(b, a) == c
    assert ccc([1, 2, 3], [1, 2, 3]) == 1.0
    assert ccc([1, 2, 3], [3, 2, 1]) == -1.0
    assert abs(ccc([1, 2, 3], [2, 3, 4]) - 4 / 7) <= 1e-12
    detail(record_property, f"max |ccc - oracle| {worst:.1e}")
    assert worst <= 1e-12


# ------------------------------------------------------------------ A5

def _q(levels, ng):
    lv = np.asarray(levels, dtype=np.int32)
    return QuantizedROI(lv[None] if lv.ndim == 2 else lv, ng, (0.0, 1.0))


@pytest.mark.criterion("A5", "radiomics oracles")
def test_a5_radiomics_oracles(record_property):
    # 2x2 slice, horizontal offset, asymmetric: pairs (1,1) and (2,2)
    assert glcm_build(_q([[1, 1], [2, 2]], 2), (1, 0)).tolist() == [[0.5, 0.0], [0.0, 0.5]]
    # row [1, 1, 2]: one run of level 1 length 2, one of level 2 length 1
    r = glrlm_build(_q([[1, 1, 2]], 2), (1, 0))
    assert r.tolist() == [[0, 1, 0], [1, 0, 0]]
    # 3x3 slice with a centre outlier: corners see 3 neighbours (mean 4/3), edges 5 (mean 6/5)
    lv = np.ones((3, 3), np.int32)
    lv[1, 1] = 2
    s, n = ngtdm_build(_q(lv, 2), "2.5d")
    assert n.tolist() == [8, 1]
    assert s[0] == pytest.approx(4 / 3 + 4 / 5, abs=1e-15) and s[1] == 1.0
    so, no = ngtdm_oracle(lv[None], 2, False)
    assert np.array_equal(n, no) and np.allclose(s, so, rtol=0, atol=1e-15)

    rng = np.random.default_rng(6)
    worst_sum = 0.0
    for k in range(50):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)), int(rng.integers(2, 8)))
        lv = random_levels(rng, shape, 4, fill=0.8)
        lv[0, 0, :2] = 1
        q = QuantizedROI(lv, 4, (0.0, 1.0))
        p = glcm_build(q, (1, 0), symmetric=True)
        counts = glcm_oracle(lv, (1, 0, 0), 4, True)
        assert np.allclose(p, counts / counts.sum(), rtol=0, atol=1e-15)
        worst_sum = max(worst_sum, abs(p.sum() - 1))
        for d in [(1, 0), (0, 1), (1, 1), (1, -1)]:
            runs = glrlm_build(q, d)
            assert np.array_equal(runs, runs_oracle(lv, d, 4))
            assert (runs * np.arange(1, runs.shape[1] + 1)).sum() == np.count_nonzero(lv)
    detail(record_property, f"fixtures exact, 50 random ROIs conserve voxels, max |sum p - 1| {worst_sum:.1e}")
    assert worst_sum <= 1e-9


# ------------------------------------------------------------------ A9

@pytest.mark.criterion("A9", "format round trips")
def test_a9_volume_round_trip(tmp_path, record_property):
    rng = np.random.default_rng(7)
    for k in range(20):
        shape = tuple(int(s) for s in rng.integers(1, 9, 3))
        data = rng.normal(-300, 400, shape).astype(np.float32)
        v = Volume(data, tuple(float(np.float32(s)) for s in rng.uniform(0.2, 4, 3)))
        save_volume(v, tmp_path / "v.ltdv")
        w = load_volume(tmp_path / "v.ltdv")
        assert w.data.tobytes() == v.data.tobytes() and w.spacing_mm == v.spacing_mm
    raw = (tmp_path / "v.ltdv").read_bytes()
    bad_inf = bytearray(raw)
    bad_inf[-4:] = struct.pack("<f", float("nan"))
    cases = [(b"XXXX" + raw[4:], BadMagicError), (raw[:4] + struct.pack("<H", 7) + raw[6:], VersionMismatchError),
             (raw[:-1], PayloadLengthError), (raw + b"\0" * 4, PayloadLengthError),
             (raw[:10], VolumeFormatError), (bytes(bad_inf), NonFiniteVoxelError)]
    for k, (blob, err) in enumerate(cases):
        (tmp_path / f"bad{k}.ltdv").write_bytes(blob)
        with pytest.raises(err):
            load_volume(tmp_path / f"bad{k}.ltdv")
    detail(record_property, f"LTDV: 20 round trips, {len(cases)} adversarial headers rejected")


@pytest.mark.criterion("A9", "format round trips")
def test_a9_checkpoint_round_trip(tmp_path, record_property):
    net = UNetPP(NetConfig(depth=3, base_channels=4, latent_dim=8), np.random.default_rng(8))
    cfg = {"kind": "autoencoder", "net": net.cfg.to_dict()}
    save_checkpoint(tmp_path / "c.ltck", cfg, net.param_arrays())
    cfg2, tensors = load_checkpoint(tmp_path / "c.ltck")
    assert cfg2 == cfg
    for k, v in net.param_arrays().items():
        assert tensors[k].tobytes() == v.tobytes() and tensors[k].shape == v.shape
    save_checkpoint(tmp_path / "d.ltck", cfg2, tensors)
    assert (tmp_path / "d.ltck").read_bytes() == (tmp_path / "c.ltck").read_bytes()
    raw = (tmp_path / "c.ltck").read_bytes()
    cases = [(b"LTCX" + raw[4:], CheckpointMagicError), (raw[:4] + struct.pack("<H", 2) + raw[6:], CheckpointVersionError),
             (raw[:-2], CheckpointTruncatedError), (raw[:8], CheckpointTruncatedError),
             (raw + b"\0", CheckpointFormatError), (raw[:10] + b"\xfe" + raw[11:], CheckpointFormatError)]
    for k, (blob, err) in enumerate(cases):
        (tmp_path / f"bad{k}.ltck").write_bytes(blob)
        with pytest.raises(err):
            load_checkpoint(tmp_path / f"bad{k}.ltck")
    detail(record_property, f"LTCK: bit-exact tensors and bytes, {len(cases)} adversarial files rejected")


# ------------------------------------------------------------ A6 / A7

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full CLI sequence at desk scale with documented defaults."""
    root = tmp_path_factory.mktemp("desk")
    data, run = root / "data", root / "run"
    man = data / "manifest.json"

    def call(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv

    call("phantom", "gen", "--out-dir", data)
    t0 = time.perf_counter()
    call("train", "phase1", "--manifest", man, "--out-dir", run)
    call("train", "phase2", "--manifest", man, "--out-dir", run)
    train_s = time.perf_counter() - t0
    call("standardize", "--manifest", man, "--out-dir", run)
    call("evaluate", "--manifest", man, "--std-dir", run / "standardized", "--out-dir", root / "eval")
    summary = json.loads((root / "eval" / "eval_summary.json").read_text())
    return {"root": root, "manifest": man, "run": run, "train_s": train_s, "summary": summary}


@pytest.mark.slow
@pytest.mark.criterion("A6", "end-to-end desk run")
def test_a6_desk_run(desk_run, record_property):
    s = desk_run["summary"]
    base, model = s["baseline_ccc"]["GLCM"], s["model_ccc"]["GLCM"]
    gain = model - base
    entries = P.load_entries(desk_run["manifest"], "eval")
    std = desk_run["run"] / "standardized"
    err_a, err_ap = [], []
    for e in entries:
        p = load_pair(e)
        ap = load_volume(std / f"pair{e.index:04d}_aprime.ltdv")
        for r in P.lesion_rois(e, p.b):
            m = r.mask.mask
            err_a.append(np.abs(p.a.data[m] - p.b.data[m]))
            err_ap.append(np.abs(ap.data[m] - p.b.data[m]))
    vox_a, vox_ap = float(np.mean(np.concatenate(err_a))), float(np.mean(np.concatenate(err_ap)))
    minutes = desk_run["train_s"] / 60
    detail(record_property,
           f"GLCM CCC {base:.3f} -> {model:.3f} (gain {gain:+.3f}, need >= 0.10); "
           f"rel err {s['baseline_rel_err']:.3f} -> {s['model_rel_err']:.3f}; "
           f"lesion |x-B| {vox_a:.1f} -> {vox_ap:.1f} HU; phases 1+2 {minutes:.1f} min on this machine")
    assert s["n_rois"] >= 32
    assert minutes <= 30
    assert s["model_rel_err"] < s["baseline_rel_err"]
    assert vox_ap < vox_a
    assert gain >= 0.10


@pytest.mark.slow
@pytest.mark.criterion("A7", "autoencoder quality")
def test_a7_reconstruction_psnr(desk_run, record_property):
    net, _ = P.load_autoencoder(desk_run["run"] / "phase1.ltck")
    slices = []
    for e in P.load_entries(desk_run["manifest"], "eval"):
        p = load_pair(e)
        slices += [p.a.data, p.b.data]
    psnr = P.reconstruction_psnr(net, np.concatenate(slices))
    detail(record_property, f"held-out PSNR {psnr:.2f} dB (need >= 20)")
    assert psnr >= 20


# ------------------------------------------------------------------ A8

SMALL = {"depth": 3, "base_channels": 4, "latent_dim": 8, "epochs1": 2, "epochs2": 3,
         "batch": 4, "hidden": 32, "temb_dim": 16, "T": 50}


def _cli_sequence(root: Path, monkeypatch):
    """Relative paths throughout, so two roots produce byte-identical trees."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "small.json").write_text(json.dumps(SMALL))
    monkeypatch.chdir(root)
    steps = [
        ["phantom", "gen", "--n", "6", "--n-train", "3", "--size", "32", "--slices", "4", "--seed", "11"],
        ["train", "phase1", "--manifest", "data/manifest.json", "--config", "small.json", "--seed", "11"],
        ["train", "phase2", "--manifest", "data/manifest.json", "--config", "small.json", "--seed", "11"],
        ["standardize", "--manifest", "data/manifest.json", "--config", "small.json", "--seed", "11",
         "--start-mode", "truncated:25"],
        ["features", "--manifest", "data/manifest.json", "--image", "std", "--std-dir", "run/standardized",
         "--out", "features.csv"],
        ["evaluate", "--manifest", "data/manifest.json", "--std-dir", "run/standardized", "--workers", "2"],
        ["report", "--ccc", "eval/ccc_model.csv", "--baseline", "eval/ccc_baseline.csv", "--out", "table.txt",
         "--pgm-dir", "pgm", "--manifest", "data/manifest.json", "--std-dir", "run/standardized"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion("A8", "determinism")
def test_a8_cli_determinism(tmp_path, monkeypatch, record_property):
    first = _cli_sequence(tmp_path / "one", monkeypatch)
    second = _cli_sequence(tmp_path / "two", monkeypatch)
    assert first.keys() == second.keys()
    differing = [k for k in first if first[k] != second[k]]
    kinds = {Path(k).suffix for k in first}
    detail(record_property, f"{len(first)} files ({', '.join(sorted(kinds))}) compared, {len(differing)} differ")
    assert not differing, differing
    assert {".ltdv", ".ltck", ".csv"} <= kinds


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
