"""Acceptance suite: one test per criterion, each logged as a PASS/FAIL/SKIP line.

Criteria that need the public MovieLens-1M files read them from the directory
named by ``SEQTWINS_ML1M_DIR`` and are skipped (reported UNVERIFIED) otherwise.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import criterion
from oracles import GRAD_CASES, bt_loss_loops, contrastive_loss_loops, op_gradient_errors
from seqtwins import tensor as T
from seqtwins.augment import AugmentationSpec, make_views, permute_batch, random_mask_batch, rng_stream, segment_mask_batch
from seqtwins.cli import main
from seqtwins.losses import barlow_twins_loss, barlow_twins_terms, cross_correlation, in_batch_contrastive_loss
from seqtwins.data import prepare
from seqtwins.experiments import ProtocolSettings, run_protocol, subsample_manifest
from seqtwins.models import ModelConfig, encode, init_parameters, project
from seqtwins.synthetic import write_movielens_like

ML1M_DIR = os.environ.get("SEQTWINS_ML1M_DIR")


# ---------------------------------------------------------------------------
# 1. gradients


class StagedBT:
    """The BT training graph split into stages so finite differences on a
    parameter only re-run the stages downstream of it.

    Stage ``k`` maps the cached activation entering it to the loss; cached
    inputs come from one unperturbed forward pass.
    """

    def __init__(self, bundle, items, lambd):
        self.b = bundle
        self.p = bundle.params
        self.items = items
        self.lambd = lambd
        self.half = len(items) // 2
        c = bundle.config
        self.names = ["embedding"] + [f"encoder.conv{i}" for i in range(len(c.conv_channels))]
        self.names += ["projector.0", "projector.1"]

    def stage(self, k, x):
        c, p = self.b.config, self.p
        n_conv = len(c.conv_channels)
        if k == 0:
            x = T.transpose(T.embedding(self.b.embedding, self.items), (0, 2, 1))
            k = 1
        while 1 <= k <= n_conv:
            i = k - 1
            x = T.maxpool1d(T.relu(T.conv1d(x, p[f"encoder.conv{i}.kernels"], p[f"encoder.conv{i}.bias"])), c.pool_size)
            k += 1
            if k == n_conv + 1:
                x = T.reshape(x, (len(self.items), c.rep_dim))
        if k == n_conv + 1:
            x = T.relu(T.linear(x, p["projector.0.weight"], p["projector.0.bias"]))
            k += 1
        x = T.linear(x, p["projector.1.weight"], p["projector.1.bias"])
        h = self.half
        corr = cross_correlation(T.mean_center_columns(T.rows(x, 0, h)), T.mean_center_columns(T.rows(x, h, 2 * h)))
        return barlow_twins_terms(corr, self.lambd)

    def inputs(self):
        """Activations entering each stage, from the unperturbed parameters."""
        c, p = self.b.config, self.p
        acts = [None]
        x = T.transpose(T.embedding(self.b.embedding, self.items), (0, 2, 1))
        for i in range(len(c.conv_channels)):
            acts.append(x)
            x = T.maxpool1d(T.relu(T.conv1d(x, p[f"encoder.conv{i}.kernels"], p[f"encoder.conv{i}.bias"])), c.pool_size)
        x = T.reshape(x, (len(self.items), c.rep_dim))
        acts.append(x)
        acts.append(T.relu(T.linear(x, p["projector.0.weight"], p["projector.0.bias"])))
        return acts


def last_layer_differences(x, z, lambd, h, eps=T.NORM_EPS):
    """Central differences for the last projector layer without re-running the loss.

    Perturbing ``W[i, j]`` (or ``bias[j]``) moves only column ``j`` of the
    projector output, hence only row and column ``j`` of the correlation
    matrix. The loss difference is summed over those entries directly.
    """
    half = len(z) // 2

    def unit(cols):  # (..., rows) -> centered, normalized along the last axis
        c = cols - cols.mean(axis=-1, keepdims=True)
        return c / (np.sqrt((c * c).sum(axis=-1, keepdims=True)) + eps)

    u1, u2 = unit(z[:half].T), unit(z[half:].T)  # (d, half)
    moves = np.vstack([x.T, np.ones((1, len(z)))])  # rows: one per weight i, last for the bias
    gw = np.empty((x.shape[1], z.shape[1]))
    gb = np.empty(z.shape[1])
    for j in range(z.shape[1]):
        contrib = []
        for sign in (1.0, -1.0):
            col = z[:, j][None, :] + sign * h * moves
            n1, n2 = unit(col[:, :half]), unit(col[:, half:])
            row = n1 @ u2.T  # C[j, k] for k != j
            colm = n2 @ u1.T  # C[k, j]
            cjj = (n1 * n2).sum(axis=1)
            off = (row**2).sum(axis=1) - row[:, j] ** 2 + (colm**2).sum(axis=1) - colm[:, j] ** 2
            contrib.append(-cjj + lambd * off)
        d = (contrib[0] - contrib[1]) / (2 * h)
        gw[:, j], gb[j] = d[:-1], d[-1]
    return gw, gb


def bt_graph_check(seed=0):
    cfg = ModelConfig(n_items=20, seq_len=16)
    bundle = init_parameters(cfg, seed, ("embedding", "encoder", "projector"))
    rng = np.random.default_rng(seed)
    rl = rng.integers(5, 17, size=4)
    items = np.where(np.arange(16)[None, :] < rl[:, None], rng.integers(1, 21, size=(4, 16)), 0)
    v1, v2 = make_views(items, rl, AugmentationSpec("segment_mask", 0.2, seed))
    both = np.concatenate([v1, v2])

    with T.Tape() as tape:
        z = project(encode(both, bundle), bundle)
        loss = barlow_twins_loss(T.rows(z, 0, 4), T.rows(z, 4, 8), 10.0)
    bundle.zero_grad()
    T.backward(tape, loss)

    staged = StagedBT(bundle, both, 10.0)
    acts = staged.inputs()
    assert staged.stage(0, None).item() == loss.item()  # same function as the model pipeline

    # Batch-of-4 correlations make the loss steeply curved between ReLU and
    # max-pool kinks; a step of 1e-6 stays inside one linear piece.
    errors, grads, fds = {}, {}, {}
    x_last = acts[-1].data
    z = T.linear(acts[-1], bundle.params["projector.1.weight"], bundle.params["projector.1.bias"]).data
    gw, gb = last_layer_differences(x_last, z, 10.0, 1e-6)
    fds["projector.1.weight"], fds["projector.1.bias"] = gw, gb

    # spot-check the shortcut against re-running the whole last stage
    w = bundle.params["projector.1.weight"]
    for i, j in [(0, 0), (17, 200), (255, 31)]:
        orig = w.data[i, j]
        w.data[i, j] = orig + 1e-6
        up = staged.stage(4, acts[4]).item()
        w.data[i, j] = orig - 1e-6
        down = staged.stage(4, acts[4]).item()
        w.data[i, j] = orig
        assert abs((up - down) / 2e-6 - gw[i, j]) <= 1e-6 * np.abs(gw).max()

    for k, prefix in enumerate(staged.names):
        for name, param in bundle.params.items():
            if name in fds:
                grads[name] = param.grad.copy()
                errors[name] = T.relative_error(grads[name], fds[name])
                continue
            if name == prefix or name.startswith(prefix + "."):
                fds[name] = T.numerical_gradient(lambda: staged.stage(k, acts[k]).item(), param, h=1e-6)
                grads[name] = param.grad.copy()
                errors[name] = T.relative_error(grads[name], fds[name])
    assert set(errors) == set(bundle.params)

    # Mean-centering cancels any shift of the last projector bias, so its true
    # gradient is zero and a ratio of two round-off residues is meaningless.
    # Check the invariance directly and that both gradients vanish instead.
    last = bundle.params["projector.1.bias"]
    before = staged.stage(0, None).item()
    last.data += 1.0
    shifted = staged.stage(0, None).item()
    last.data -= 1.0
    assert abs(shifted - before) <= 1e-9 * abs(before)
    scale = np.sqrt(sum(np.sum(g**2) for g in grads.values()))
    zero = max(np.abs(grads["projector.1.bias"]).max(), np.abs(fds["projector.1.bias"]).max()) / scale
    del errors["projector.1.bias"]
    names = sorted(grads)
    flat = T.relative_error(np.concatenate([grads[n].ravel() for n in names]),
                            np.concatenate([fds[n].ravel() for n in names]))
    return errors, zero, flat


def test_criterion_01_gradients():
    with criterion(1, "backward matches central differences (every op + full BT graph), < 1 min") as note:
        t0 = time.perf_counter()
        worst_op = max(max(op_gradient_errors(name, seed)) for name in GRAD_CASES for seed in range(5))
        graph, zero, flat = bt_graph_check()
        elapsed = time.perf_counter() - t0
        worst_graph = max(graph.values())
        note["detail"] = (f"ops max rel err {worst_op:.1e}; BT graph: per-tensor max {worst_graph:.1e}, "
                          f"all-parameter {flat:.1e}, invariant bias {zero:.1e}; {elapsed:.0f}s")
        assert worst_op < 1e-4, worst_op
        assert worst_graph < 1e-4, {k: v for k, v in graph.items() if v >= 1e-4}
        assert flat < 1e-4, flat
        assert zero < 1e-9, zero
        assert elapsed < 60, elapsed


# ---------------------------------------------------------------------------
# 2-3. losses


def test_criterion_02_loss_oracles():
    with criterion(2, "both losses equal double-loop oracles within 1e-12 on 100 instances") as note:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            b, d = rng.integers(2, 7), rng.integers(1, 6)
            y1, y2 = rng.normal(size=(b, d)), rng.normal(size=(b, d))
            lambd = float(rng.uniform(0, 20))
            got = barlow_twins_loss(T.Tensor(y1), T.Tensor(y2), lambd).item()
            worst = max(worst, abs(got - bt_loss_loops(y1.tolist(), y2.tolist(), lambd)))

            v, k = rng.integers(b, 12), rng.integers(1, 6)
            ctx, table = rng.normal(size=(b, k)), rng.normal(size=(v + 1, k))
            targets = rng.integers(1, v + 1, size=b)
            got = in_batch_contrastive_loss(T.Tensor(ctx), targets, T.Tensor(table)).item()
            worst = max(worst, abs(got - contrastive_loss_loops(ctx.tolist(), targets.tolist(), table.tolist())))
        note["detail"] = f"max abs diff {worst:.1e}"
        assert worst <= 1e-12


def test_criterion_03_analytic_values():
    with criterion(3, "orthogonal columns -> 0, correlated 2-dim at lambda=10 -> 20") as note:
        x = np.random.default_rng(3).normal(size=(12, 5))
        q, _ = np.linalg.qr(x - x.mean(axis=0))  # orthonormal, zero-mean columns
        zeros = [barlow_twins_loss(T.Tensor(v), T.Tensor(v), 10.0).item() for v in (q, q * [1, 2, 3, 4, 5])]
        ortho = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        zero = max(abs(z) for z in zeros + [barlow_twins_loss(T.Tensor(ortho), T.Tensor(ortho), 10.0).item()])
        same = np.array([[1.0, 1.0], [-1.0, -1.0]])
        twenty = barlow_twins_loss(T.Tensor(same), T.Tensor(same), 10.0).item()
        note["detail"] = f"{zero:.2e}, {twenty:.12f}"
        assert abs(zero) < 1e-9
        assert abs(twenty - 20.0) < 1e-9


# ---------------------------------------------------------------------------
# 4. augmentations


def test_criterion_04_augmentation_statistics():
    with criterion(4, "random_mask mean 3.2+-0.05; segment exact; permute keeps multisets") as note:
        n = 100_000
        items = np.arange(1, 17)[None, :].repeat(n, axis=0)
        rl = np.full(n, 16)
        masked = (random_mask_batch(items, rl, 0.2, rng_stream(4, 0)) == 0).sum(axis=1)
        mean = masked.mean()

        rng = rng_stream(4, 1)
        rl = rng.integers(1, 17, size=n)
        prefix = np.arange(16)[None, :] < rl[:, None]
        items = np.where(prefix, rng.integers(1, 50, size=(n, 16)), 0)
        seg = segment_mask_batch(items, rl, 0.2, rng)
        hit = (seg == 0) & prefix
        runs = np.diff(np.pad(hit.astype(int), ((0, 0), (1, 1))), axis=1)
        exact = (hit.sum(axis=1) == np.floor(0.2 * rl)) & ((runs == 1).sum(axis=1) <= 1) & np.all(seg[~prefix] == 0)

        perm = permute_batch(items, rl, rng)
        kept = np.array_equal(np.sort(perm, axis=1), np.sort(items, axis=1)) and np.array_equal(perm[~prefix], items[~prefix])
        note["detail"] = f"mean {mean:.4f}, segment exact {exact.mean():.0%}, permute ok {kept}"
        assert abs(mean - 3.2) <= 0.05
        assert exact.all()
        assert kept


# ---------------------------------------------------------------------------
# 5-8. MovieLens-1M reproduction (needs the public files)


def require_ml1m():
    if not (ML1M_DIR and Path(ML1M_DIR, "ratings.dat").is_file()):
        pytest.skip("UNVERIFIED: set SEQTWINS_ML1M_DIR to the public ml-1m directory")
    return prepare("movielens-1m", ML1M_DIR, seq_len=16, min_actions=10, seed=0)


@pytest.mark.ml1m
def test_criterion_05_ml1m_counts():
    with criterion(5, "ML-1M users/items/categories/splits equal the reference counts") as note:
        st = require_ml1m().stats
        got = {k: st[k] for k in ("n_users", "n_items", "n_categories", "n_train", "n_val", "n_test")}
        note["detail"] = str(got)
        assert got == {"n_users": 6040, "n_items": 3952, "n_categories": 18,
                       "n_train": 795335, "n_val": 99417, "n_test": 99417}
        assert 0.9e6 <= st["n_actions"] <= 1.1e6


def _protocol(data, max_sequences=None):
    if max_sequences is not None:
        data.manifest = subsample_manifest(data.manifest, max_sequences, 0)
    t0 = time.perf_counter()
    results, _ = run_protocol(data, ProtocolSettings())
    return results, time.perf_counter() - t0


# scale -> (max sequences, time budget in seconds)
SCALES = {"desk": (100_000, 20 * 60), "full": (None, 2 * 3600)}
_RUNS = {}


def ml1m_protocol(scale):
    """Protocol results on ML-1M at ``scale``, computed once per session."""
    if scale == "full" and os.environ.get("SEQTWINS_FULL_PROTOCOL") != "1":
        pytest.skip("UNVERIFIED: the full-scale run needs SEQTWINS_FULL_PROTOCOL=1")
    if scale not in _RUNS:
        _RUNS[scale] = _protocol(require_ml1m(), SCALES[scale][0])
    return _RUNS[scale]


def _gap_check(results, elapsed, budget, note):
    bt, scratch = results["bt_fixed"].best, results["scratch"].best
    note["detail"] = f"bt_fixed {bt:.4f} vs scratch {scratch:.4f}, {elapsed / 60:.1f} min"
    assert bt - scratch >= 0.05
    assert elapsed <= budget


def _de_check(results, note):
    de, bt = results["de_fixed"].best, results["bt_fixed"].best
    note["detail"] = f"de_fixed {de:.4f} vs bt_fixed {bt:.4f}"
    assert de <= bt


def _drop_check(results, note):
    tr, fx = results["bt_trainable"], results["bt_fixed"]
    note["detail"] = f"trainable drop {tr.drop:.4f} vs fixed drop {fx.drop:.4f}"
    assert tr.drop > fx.drop


@pytest.mark.ml1m
@pytest.mark.slow
@pytest.mark.parametrize("scale", sorted(SCALES))
def test_criterion_06_bt_beats_scratch(scale):
    with criterion(6, f"[ML-1M {scale}] fixed BT encoder >= scratch + 5 points on 1% labels") as note:
        results, elapsed = ml1m_protocol(scale)
        _gap_check(results, elapsed, SCALES[scale][1], note)


@pytest.mark.ml1m
@pytest.mark.slow
@pytest.mark.parametrize("scale", sorted(SCALES))
def test_criterion_07_de_transfers_worse(scale):
    with criterion(7, f"[ML-1M {scale}] fixed DE encoder <= fixed BT encoder") as note:
        _de_check(ml1m_protocol(scale)[0], note)


@pytest.mark.ml1m
@pytest.mark.slow
@pytest.mark.parametrize("scale", sorted(SCALES))
def test_criterion_08_trainable_overfits_more(scale):
    with criterion(8, f"[ML-1M {scale}] trainable best-to-final drop > fixed drop") as note:
        _drop_check(ml1m_protocol(scale)[0], note)


# Surrogates: the same protocol and settings on the bundled synthetic
# MovieLens-like corpus. They stand in for 6-8 only as a smoke check of the
# pipeline; the synthetic genres are a planted signal, not real tastes.

SURROGATE_MISS = (
    "observed on the synthetic corpus at lambda=10, batch 128: Barlow Twins drives the "
    "representation to near-majority accuracy"
)


@pytest.fixture(scope="module")
def surrogate(tmp_path_factory):
    root = tmp_path_factory.mktemp("surrogate")
    write_movielens_like(root, seed=0)
    return _protocol(prepare("movielens-1m", root, seq_len=16, min_actions=10, seed=0))


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=SURROGATE_MISS)
def test_criterion_06s_synthetic_surrogate(surrogate):
    results, elapsed = surrogate
    with criterion("6s", "[synthetic surrogate] fixed BT encoder >= scratch + 5 points") as note:
        _gap_check(results, elapsed, SCALES["desk"][1], note)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=SURROGATE_MISS)
def test_criterion_07s_synthetic_surrogate(surrogate):
    with criterion("7s", "[synthetic surrogate] fixed DE encoder <= fixed BT encoder") as note:
        _de_check(surrogate[0], note)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="observed on the synthetic corpus: neither arm overfits within 50 epochs")
def test_criterion_08s_synthetic_surrogate(surrogate):
    with criterion("8s", "[synthetic surrogate] trainable best-to-final drop > fixed drop") as note:
        _drop_check(surrogate[0], note)


def test_criterion_09_cell_values_not_targets():
    with criterion(9, "exact reference cell values are not targets; report carries best and final accuracy"):
        from seqtwins.cli import REPORT_HEADER

        assert {"best", "final"} <= set(REPORT_HEADER)


# ---------------------------------------------------------------------------
# 10. determinism


def test_criterion_10_repeat_identical_metrics(synthetic_dir, tmp_path):
    with criterion(10, "same command + seed twice gives identical metrics.csv"):
        outs = []
        for rep in ("a", "b"):
            root = tmp_path / rep
            steps = [
                ["prepare", "--data-dir", str(synthetic_dir), "--out", str(root / "data")],
                ["pretrain", "--data", str(root / "data"), "--out", str(root), "--method", "bt", "--epochs", "2",
                 "--batch-size", "32", "--seed", "5"],
                ["pretrain", "--data", str(root / "data"), "--out", str(root), "--method", "de", "--epochs", "1",
                 "--batch-size", "32", "--seed", "5"],
                ["finetune", "--data", str(root / "data"), "--out", str(root), "--label-fraction", "0.2",
                 "--epochs", "3", "--seed", "5"],
                ["report", "--out", str(root)],
            ]
            for args in steps:
                assert main(args) == 0, args
            outs.append(((root / "metrics.csv").read_bytes(), (root / "report.csv").read_bytes()))
        assert len(outs[0][0].splitlines()) > 10
        assert outs[0] == outs[1]
