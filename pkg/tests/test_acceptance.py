"""Acceptance gate: end-to-end checks of the full-size model at release
tolerances.  Each criterion prints a single PASS/FAIL line on the real
terminal (bypassing capture) in addition to its assertions."""

import json
import time

import numpy as np
import pytest

from qhnet import cli, data, hamiltonian, irreps, spectra, train
from qhnet.autodiff import gradcheck
from qhnet.nn import ModelConfig, QHNet, loss_node


@pytest.fixture()
def announce(capfd):
    def _p(line):
        with capfd.disabled():
            print(line, flush=True)

    return _p


# ---------------------------------------------------------------------------
# 1. equivariance of the full-size model under rigid motions


def test_criterion_1_equivariance(announce):
    t0 = time.time()
    model = QHNet(ModelConfig())
    store = model.init_params(seed=0)
    rng = np.random.default_rng(2026)
    worst_rot = worst_trans = worst_perm = 0.0
    for template in ("water", "malondialdehyde", "uracil"):
        atoms, base = data.TEMPLATES[template]
        atoms = list(atoms)
        h0 = model.predict_hamiltonian(store, atoms, base)
        for _ in range(20):
            r = irreps.random_rotation(rng)
            d = hamiltonian.block_rotation(atoms, r)
            h_rot = model.predict_hamiltonian(store, atoms, base @ r.T)
            worst_rot = max(worst_rot, float(np.max(np.abs(h_rot - d @ h0 @ d.T))))
            t = data.grid_snap(4.0 * rng.standard_normal(3))
            h_tr = model.predict_hamiltonian(store, atoms, base + t)
            worst_trans = max(worst_trans, float(np.max(np.abs(h_tr - h0))))
            perm = list(rng.permutation(len(atoms)))
            p = hamiltonian.orbital_permutation(atoms, perm)
            h_perm = model.predict_hamiltonian(store, [atoms[k] for k in perm], base[perm])
            worst_perm = max(worst_perm, float(np.max(np.abs(h_perm - p @ h0 @ p.T))))
    elapsed = time.time() - t0
    ok = worst_rot < 1e-10 and worst_trans == 0.0 and worst_perm == 0.0 and elapsed < 120.0
    announce(
        f"[criterion 1] equivariance (rot {worst_rot:.2e}, trans {worst_trans}, "
        f"perm {worst_perm}, {elapsed:.0f}s): {'PASS' if ok else 'FAIL'}"
    )
    assert worst_rot < 1e-10
    assert worst_trans == 0.0
    assert worst_perm == 0.0
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 2. tensor-product invocation counts


def test_criterion_2_tensor_product_counts(announce):
    t0 = time.time()
    counts = QHNet(ModelConfig()).count_tp()
    elapsed = time.time() - t0
    ok = counts == {"total": 9, "max_sequential": 6} and elapsed < 1.0
    announce(f"[criterion 2] tensor-product counts {counts} ({elapsed:.2f}s): {'PASS' if ok else 'FAIL'}")
    assert counts == {"total": 9, "max_sequential": 6}
    assert elapsed < 1.0


# ---------------------------------------------------------------------------
# 3. algebraic identities of the equivariant kernel


def test_criterion_3_algebraic_identities(announce):
    t0 = time.time()
    l_max = 4
    cg = irreps.build_cg_table(l_max, l3_max=2 * l_max)

    worst_orth = 0.0
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            cols = [
                cg.block((l1, l2, l3)).reshape(-1, 2 * l3 + 1)
                for l3 in range(abs(l1 - l2), l1 + l2 + 1)
            ]
            c = np.concatenate(cols, axis=1)
            worst_orth = max(worst_orth, float(np.max(np.abs(c.T @ c - np.eye(c.shape[1])))))

    worst_recon = 0.0
    rng = np.random.default_rng(7)
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            u = rng.standard_normal(2 * l1 + 1)
            v = rng.standard_normal(2 * l2 + 1)
            recon = np.zeros((2 * l1 + 1, 2 * l2 + 1))
            for l3 in range(abs(l1 - l2), l1 + l2 + 1):
                w = irreps.tensor_product_path(u, v, (l1, l2, l3), cg)
                recon += irreps.tensor_expansion_path(w, (l1, l2, l3), cg)
            worst_recon = max(worst_recon, float(np.max(np.abs(recon - np.outer(u, v)))))

    worst_homo = 0.0
    for _ in range(10):
        r1 = irreps.random_rotation(rng)
        r2 = irreps.random_rotation(rng)
        for l in range(l_max + 1):
            d12 = irreps.wigner_d(l, r1 @ r2)
            d1 = irreps.wigner_d(l, r1)
            d2 = irreps.wigner_d(l, r2)
            worst_homo = max(worst_homo, float(np.max(np.abs(d12 - d1 @ d2))))

    elapsed = time.time() - t0
    ok = worst_orth <= 1e-12 and worst_recon <= 1e-11 and worst_homo <= 1e-11 and elapsed < 60.0
    announce(
        f"[criterion 3] algebra (orth {worst_orth:.2e}, recon {worst_recon:.2e}, "
        f"homo {worst_homo:.2e}, {elapsed:.0f}s): {'PASS' if ok else 'FAIL'}"
    )
    assert worst_orth <= 1e-12
    assert worst_recon <= 1e-11
    assert worst_homo <= 1e-11
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 4. analytic gradients of the full model vs central finite differences


def test_criterion_4_full_model_gradcheck(announce):
    t0 = time.time()
    model = QHNet(ModelConfig())
    store = model.init_params(seed=0)
    rng = np.random.default_rng(0)
    atoms = [8, 1, 1]
    pos = np.array([[0.0, 0.0, 0.0], [1.8, 0.0, 0.0], [-0.45, 1.75, 0.0]])
    label = model.predict_hamiltonian(store, atoms, pos) + 0.1 * rng.standard_normal((24, 24))

    def objective(store, tape):
        md, mo, geom, _ = model.forward(tape, store, atoms, pos)
        hp = model.hamiltonian_node(tape, md, mo, atoms, geom)
        # conditioning scale keeps finite-difference roundoff below the floor
        return tape.scale(loss_node(tape, hp, label[None]), 1e-9)

    err = gradcheck(objective, store, eps=1e-6, samples=50, rng=np.random.default_rng(0))
    elapsed = time.time() - t0
    ok = err < 1e-5 and elapsed < 300.0
    announce(f"[criterion 4] gradcheck (worst rel err {err:.2e}, {elapsed:.0f}s): {'PASS' if ok else 'FAIL'}")
    assert err < 1e-5
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 5. generalized eigensolver vs constructive oracle


def _constructive_pencil(n, rng):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0.0, np.log(10.0), n))
    s = (q * lam) @ q.T
    eps = np.sort(rng.uniform(-25.0, 5.0, n))
    l = spectra.cholesky(s)
    q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    c = spectra._solve_lower_t(l, q2)
    h = s @ c @ np.diag(eps) @ c.T @ s
    return spectra.Pencil(0.5 * (h + h.T), s), eps


def test_criterion_5_eigensolver_oracle(announce):
    rng = np.random.default_rng(55)
    required = [24, 72, 90, 132]
    sizes = required + [int(rng.integers(2, 133)) for _ in range(96)]
    worst_eps = worst_res = 0.0
    for n in sizes:
        pencil, eps_true = _constructive_pencil(n, rng)
        sp = spectra.generalized_eig(pencil)
        worst_eps = max(worst_eps, float(np.max(np.abs(sp.eps - eps_true))))
        res = pencil.h @ sp.c - pencil.s @ sp.c @ np.diag(sp.eps)
        worst_res = max(worst_res, float(np.max(np.abs(res))))
    ok = worst_eps < 1e-10 and worst_res < 1e-10
    announce(
        f"[criterion 5] eigensolver, 100 pencils incl dims {required} "
        f"(eps {worst_eps:.2e}, residual {worst_res:.2e}): {'PASS' if ok else 'FAIL'}"
    )
    assert worst_eps < 1e-10
    assert worst_res < 1e-10


# ---------------------------------------------------------------------------
# 6. teacher-student overfit on synthetic water conformations


def test_criterion_6_teacher_student_overfit(announce):
    t0 = time.time()
    cfg = ModelConfig(channels=16)
    confs, _ = data.teacher_generate(cfg, seed=11, n_samples=20, template="water")
    train_set, val_set = confs[:16], confs[16:]
    label_std = float(np.std(np.stack([c.hamiltonian for c in train_set])))
    tcfg = train.TrainConfig(max_steps=2000, warmup_steps=10, eval_every=250, batch_size=8, seed=3)
    model = QHNet(cfg)
    _, store = train.train_loop(model, train_set, val_set, tcfg)
    tr = train.evaluate(model, store, train_set)
    va = train.evaluate(model, store, val_set)
    elapsed = time.time() - t0
    ok = tr["mae_H"] < 1e-3 * label_std and va["cos_psi"] > 0.999 and elapsed < 900.0
    announce(
        f"[criterion 6] overfit (train mae_H {tr['mae_H']:.2e} vs {1e-3 * label_std:.2e}, "
        f"held-out cos_psi {va['cos_psi']:.6f}, {elapsed / 60:.1f} min): {'PASS' if ok else 'FAIL'}"
    )
    assert tr["mae_H"] < 1e-3 * label_std
    assert va["cos_psi"] > 0.999
    assert elapsed < 900.0


# ---------------------------------------------------------------------------
# 7. ablation configurations train and remain equivariant


def test_criterion_7_ablations(announce):
    results = []
    for overrides in ({"use_attentive_scores": False}, {"use_norm_gate": False}):
        cfg = ModelConfig(channels=16, **overrides)
        confs, _ = data.teacher_generate(cfg, seed=4, n_samples=4, template="water")
        model = QHNet(cfg)
        tcfg = train.TrainConfig(max_steps=6, warmup_steps=2, eval_every=3, batch_size=2, seed=1)
        hist, store = train.train_loop(model, confs[:3], confs[3:], tcfg)
        assert len(hist) == 6 and all(np.isfinite(h["train_loss"]) for h in hist)
        rng = np.random.default_rng(9)
        atoms, base = data.TEMPLATES["water"]
        atoms = list(atoms)
        h0 = model.predict_hamiltonian(store, atoms, base)
        worst = 0.0
        for _ in range(3):
            r = irreps.random_rotation(rng)
            d = hamiltonian.block_rotation(atoms, r)
            h_rot = model.predict_hamiltonian(store, atoms, base @ r.T)
            worst = max(worst, float(np.max(np.abs(h_rot - d @ h0 @ d.T))))
        results.append((sorted(overrides)[0], worst))
    ok = all(w < 1e-10 for _, w in results)
    detail = ", ".join(f"{name} rot {w:.2e}" for name, w in results)
    announce(f"[criterion 7] ablations train and stay equivariant ({detail}): {'PASS' if ok else 'FAIL'}")
    for _, w in results:
        assert w < 1e-10


# ---------------------------------------------------------------------------
# 8. bit-identical reruns with fixed seeds on one thread


def test_criterion_8_determinism(announce, tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "channels = 4\nn_interaction_layers = 2\nmax_steps = 6\n"
        "warmup_steps = 2\neval_every = 3\nbatch_size = 2\n"
    )
    ds = tmp_path / "d.jsonl"
    rc = cli.main(
        ["--threads", "1", "generate-data", "--template", "water", "--n", "4",
         "--seed", "2", "--out", str(ds), "--config", str(cfg_file)]
    )
    assert rc == 0
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        rc = cli.main(
            ["--threads", "1", "train", "--config", str(cfg_file), "--data", str(ds),
             "--out", str(out), "--val-n", "1", "--seed", "0"]
        )
        assert rc == 0
        outs.append(out)
    same_log = (outs[0] / "metrics.jsonl").read_bytes() == (outs[1] / "metrics.jsonl").read_bytes()
    same_last = (outs[0] / "ckpt.last").read_bytes() == (outs[1] / "ckpt.last").read_bytes()
    same_best = (outs[0] / "ckpt.best").read_bytes() == (outs[1] / "ckpt.best").read_bytes()
    ok = same_log and same_last and same_best
    announce(
        f"[criterion 8] determinism (log {same_log}, last {same_last}, best {same_best}): "
        f"{'PASS' if ok else 'FAIL'}"
    )
    assert same_log and same_last and same_best
