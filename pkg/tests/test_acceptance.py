"""Acceptance suite: one test per criterion, each printed as PASS/FAIL in the terminal summary.

The ordering experiments share the session ``pipeline`` fixture (conftest.py),
which trains both stages once on the seeded 200-scene dataset.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch

from latentogm.analysis import decode, interpolate, is_monotone, occupied_centroid, reconstruct_one
from latentogm.errors import ChecksumError
from latentogm.gridworld import Agent, SimConfig, World, generate_dataset, make_world, scene_rng, simulate_scene
from latentogm.latent_predict import (LatentSequence, decode_latents, encode_latents, load_latent_dataset,
                                      max_latent_norm, rollout)
from latentogm.metrics import is_metric, is_metric_oracle
from latentogm.models import LatentPair, MultiScaleDiscriminator, PosteriorParams, StyleModulation, load_repr_model
from latentogm.ogm import CLASS_VALUES, GridSpec, Ogm, ScenarioSequence, classify_array, decode_sequence, \
    encode_sequence
from latentogm.repr_train import (ReprTrainConfig, discriminator_loss, generator_adversarial_loss, kl_divergence,
                                  load_frames, read_log, recon_loss, reconstruction_is, train_representation)
from latentogm.util import read_json

from .conftest import CONFIGS
from .helpers import central_difference_check, tiny_model_config
from .test_repr_train import kl_monte_carlo, random_posterior

GRID16 = GridSpec(16, 16, 0.5)


@pytest.mark.criterion(1, "IS metric equals the brute-force oracle")
def test_is_metric_matches_oracle(criterion):
    t0 = time.perf_counter()
    n = 0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            probs = rng.dirichlet(np.ones(3) * 0.7)
            a, b = (Ogm(GRID16, CLASS_VALUES[rng.choice(3, size=(16, 16), p=probs)]) for _ in range(2))
            assert is_metric(a, b) == is_metric_oracle(a, b)
            assert is_metric(a, b) == is_metric(b, a)
            assert is_metric(a, a) == 0.0
            n += 1
    elapsed = time.perf_counter() - t0
    criterion(f"{n} pairs, {elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.criterion(2, "closed-form KL matches Monte Carlo")
def test_kl_matches_monte_carlo(criterion):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(20):
        p = random_posterior(g, scale=0.7)
        mc, se = kl_monte_carlo(p, 100_000, g)
        z = abs(kl_divergence(p).item() - mc) / se
        worst = max(worst, z)
        assert z < 3
    zero = PosteriorParams(torch.zeros(1, 4), torch.zeros(1, 4), torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 2))
    assert kl_divergence(zero).item() == 0.0
    elapsed = time.perf_counter() - t0
    criterion(f"worst deviation {worst:.2f} SE, {elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.criterion(3, "analytic gradients match central differences")
def test_gradient_checks(criterion):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    errs = {}
    x = torch.rand((2, 1, 8, 8), generator=g, dtype=torch.float64)
    x_hat = torch.rand((2, 1, 8, 8), generator=g, dtype=torch.float64) * 0.8 + 0.1
    for mode in ("BCE", "MSE", "RANDOM_FEATURE"):
        errs[mode] = central_difference_check(lambda t: recon_loss(x, t, mode), x_hat)
    torch.manual_seed(0)
    D = MultiScaleDiscriminator(tiny_model_config()).double()
    errs["g_loss"] = central_difference_check(lambda t: generator_adversarial_loss(D(t)), x_hat)
    errs["d_loss_fake"] = central_difference_check(lambda t: discriminator_loss(D(x), D(t)), x_hat)
    errs["d_loss_real"] = central_difference_check(lambda t: discriminator_loss(D(t), D(x_hat)), x)
    mod = StyleModulation(3, 4).double()
    with torch.no_grad():
        mod.affine.bias.normal_()
    h = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    s = torch.randn(2, 4, dtype=torch.float64)
    w = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    errs["modulation_x"] = central_difference_check(lambda t: (mod(t, s) * w).sum(), h)
    errs["modulation_style"] = central_difference_check(lambda t: (mod(h, t) * w).sum(), s)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    criterion(f"worst {worst} {errs[worst]:.1e}, {elapsed:.1f}s")
    assert all(e < 1e-4 for e in errs.values()), errs
    assert elapsed < 300


@pytest.mark.criterion(4, "logged loss totals decompose exactly")
def test_loss_decomposition(criterion, tmp_path):
    cfg = SimConfig(grid=GRID16, n_scenes=3, frames_per_scene=20, n_rays=90, max_range=5.0)
    data = generate_dataset(cfg, 0, tmp_path / "data")
    model = tiny_model_config(grid=GRID16, enc_channels=(3, 4), gen_channels=(4, 3))
    worst = 0.0
    for mode, beta in (("VAE", 0.5), ("VAE-GAN", 0.01)):
        rc = ReprTrainConfig(mode=mode, beta=beta, steps=200, batch_size=8, checkpoint_every=200, model=model)
        res = train_representation(data, rc, tmp_path / f"{mode}.ckpt")
        rows = read_log(res.log_path)
        assert len(rows) == 200
        for r in rows:
            vae = r["recon"] + beta * r["kl"]
            parts = [(r["total"], vae)] if mode == "VAE" else [(r["vae"], vae), (r["total"], r["vae"] + r["g_loss"])]
            for got, want in parts:
                err = abs(got - want) / max(1.0, abs(want))
                worst = max(worst, err)
    criterion(f"worst relative gap {worst:.1e} over 400 steps")
    assert worst <= 1e-6


@pytest.fixture(scope="module")
def smoke_stage1(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    data = generate_dataset(SimConfig.from_dict(read_json(CONFIGS / "smoke_sim.json")), 0, root / "data")
    rc = ReprTrainConfig.from_dict(read_json(CONFIGS / "smoke_repr.json"))
    res = train_representation(data, rc, root / "repr.ckpt")
    held = load_frames(data, ["val", "test"])
    ris = reconstruction_is(res.model, held)
    return res, ris, time.perf_counter() - t0


@pytest.mark.slow
@pytest.mark.criterion(5, "stage-1 learning signal on the 10-scene dataset")
def test_stage1_learning_signal(criterion, smoke_stage1):
    res, ris, elapsed = smoke_stage1
    first = res.history[0]["recon"]
    last = float(np.mean([r["recon"] for r in res.history[-20:]]))
    criterion(f"recon {first:.4f} -> {last:.4f} ({last / first:.1%}); held-out IS {ris['matched']:.2f} "
              f"vs shuffled {ris['shuffled']:.2f}; {elapsed / 60:.1f} min")
    assert len(res.history) == 500
    assert last < 0.5 * first
    assert ris["matched"] < ris["shuffled"]
    assert elapsed < 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(6, "stage-1 parameters unchanged by predictor training")
def test_stage_separation(criterion, pipeline):
    criterion(f"encoder {pipeline.hashes_after['encoder'][:12]} generator {pipeline.hashes_after['generator'][:12]}")
    assert pipeline.hashes_before == pipeline.hashes_after


@pytest.mark.slow
@pytest.mark.criterion(7, "pipeline beats copy-last at horizon 15; predictor beats constant latent")
def test_end_to_end_ordering(criterion, pipeline):
    m = pipeline.model_report.per_horizon()[-1]
    c = pipeline.copy_last_report.per_horizon()[-1]
    pres = pipeline.pred_result
    total = sum(pipeline.seconds.values())
    criterion(f"IS@15 pipeline {m['is_mean']:.3f}±{m['is_se']:.3f} vs copy-last {c['is_mean']:.3f}±{c['is_se']:.3f} "
              f"(n={m['n']}); latent val {pres.best_val:.4f} vs constant {pres.baseline_val:.4f}; "
              f"{total / 60:.1f} min")
    assert m["t"] == c["t"] == 15
    assert m["is_mean"] < c["is_mean"]
    assert pres.best_val < pres.baseline_val
    assert total < 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(8, "rollout to T=35 stays bounded and decodes")
def test_rollout_stability(criterion, pipeline):
    _, by_split = load_latent_dataset(pipeline.latents)
    bound = 10 * max_latent_norm(by_split["train"])
    model = pipeline.pred_result.model
    test = by_split["test"]
    prefix = torch.from_numpy(np.stack([s.latents[: model.cfg.H] for s in test]))
    with torch.no_grad():
        z = rollout(model, prefix, 35)
    assert z.shape == (len(test), 35, prefix.shape[-1])
    assert torch.isfinite(z).all()
    norms = z.norm(dim=-1)
    repr_model, _ = load_repr_model(pipeline.repr_ckpt)
    repr_model.eval()
    seq = test[0]
    for t in range(35):
        grid = decode(repr_model, LatentPair.from_flat(z[0, t : t + 1], seq.style_dim, seq.content_shape))
        assert grid.values.shape == repr_model.cfg.grid.shape
        assert np.isfinite(grid.values).all() and grid.values.min() >= 0 and grid.values.max() <= 1
    criterion(f"max norm {norms.max().item():.1f} <= bound {bound:.1f}")
    assert norms.max().item() <= bound


def one_agent_scene(index: int, gap: int = 5) -> np.ndarray:
    """Stationary ego, one agent driving past on the near lane without crossing the ego's line of sight."""
    cfg = SimConfig(frames_per_scene=max(gap + 1, 20), n_agents=(1, 1), ego_speed=(0.0, 0.0))
    world = make_world(cfg, scene_rng(100, index))
    agent = Agent((world.ego.position[0] - 10.0, cfg.lane_offset), (8.0, 0.0))
    world = World(world.bounds, world.static_obstacles, (agent,), world.ego, v_max=world.v_max)
    return simulate_scene(cfg, world).stacked()[[0, gap]]


def lane_rows(frames: np.ndarray) -> slice:
    """Rows holding occupied cells on the road (agent only) in either endpoint, padded by two."""
    h = frames.shape[1]
    road = np.abs(np.arange(h) - h / 2) < 15
    occ = np.nonzero(np.any([(classify_array(f) == 2).any(1) & road for f in frames], axis=0))[0]
    return slice(occ.min() - 2, occ.max() + 3)


@pytest.mark.slow
@pytest.mark.criterion(9, "interpolation endpoints exact; centroids monotone")
def test_interpolation(criterion, pipeline):
    model, _ = load_repr_model(pipeline.repr_ckpt)
    model.eval()
    monotone = []
    for index in range(10):
        x = one_agent_scene(index)
        out = interpolate(x[0], x[1], 5, model, model)
        assert np.array_equal(out[0].values, reconstruct_one(model, x[0]).values)
        assert np.array_equal(out[-1].values, reconstruct_one(model, x[1]).values)
        rows = lane_rows(x)
        cols = [occupied_centroid(o, rows=rows) for o in out]
        monotone.append(all(c is not None for c in cols) and is_monotone([c[1] for c in cols]))
        if index == 0:
            designated = [None if c is None else round(float(c[1]), 1) for c in cols]
    criterion(f"scene 0 centroid columns {designated}; monotone in {sum(monotone)}/10 scenes")
    assert monotone[0]


@pytest.mark.criterion(10, "OGMS and LATS round-trip bit-identically; corruption rejected")
def test_format_round_trips(criterion):
    rng = np.random.default_rng(0)
    for i in range(1000):
        w, h = (int(v) for v in rng.integers(8, 24, size=2))
        T = int(rng.integers(5, 9))
        spec = GridSpec(w, h, float(rng.uniform(0.05, 2.0)))
        seq = ScenarioSequence(spec, tuple(Ogm(spec, rng.random((h, w), dtype=np.float32)) for _ in range(T)),
                               rng.normal(size=(T, 3)).astype(np.float32), 2, 3, f"s{i}")
        blob = encode_sequence(seq)
        back = decode_sequence(blob)
        assert back == seq and encode_sequence(back) == blob
        S, C = int(rng.integers(1, 6)), tuple(int(v) for v in rng.integers(1, 4, size=3))
        lat = LatentSequence(f"l{i}", rng.normal(size=(T, S + math.prod(C))).astype(np.float32), S, C, 2, 3)
        lblob = encode_latents(lat)
        lback = decode_latents(lblob)
        assert lback == lat and encode_latents(lback) == lblob
        if i % 100 == 0:
            for good, decoder in ((blob, decode_sequence), (lblob, decode_latents)):
                bad = bytearray(good)
                bad[len(bad) // 2] ^= 0x01
                with pytest.raises(ChecksumError):
                    decoder(bytes(bad))
    criterion("1000 OGMS + 1000 LATS sequences")
