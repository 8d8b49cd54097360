"""Acceptance suite: the eight shipped guarantees, end to end.

Each test prints one ``[Cn] PASS/FAIL`` verdict line (straight to the
real stdout so it survives capture) and then asserts, so a red test
always comes with its verdict in the log.  The heavyweight pipeline
(collect, codec, predictor, adaptation, servo evaluation) is built once
per session on the ``paper`` preset and shared by C3 through C6.
"""

import sys
import time

import numpy as np
import pytest

from servopb import autodiff as ad
from servopb.autodiff import BnStats, Tape, Tensor, backward, recording
from servopb.bench import (
    Preset,
    outcome_rates,
    read_outcomes,
    stage_adapt,
    stage_codec,
    stage_collect,
    stage_eval,
    stage_train,
)
from servopb.cli import main as cli_main
from servopb.collect import collect_episode, sample_placement
from servopb.model import VsnpbConfig, VsnpbModel, VsnpbNet, train_vsnpb
from servopb.rng import substream
from servopb.toy import fit_regime_gains, make_toy_dataset
from servopb.world import ArmWorld, Command
from servopb.world.scenario import load_default

SEED = 2026


def _verdict(num: int, ok: bool, detail: str) -> bool:
    print(f"[C{num}] {'PASS' if ok else 'FAIL'} {detail}",
          file=sys.__stdout__, flush=True)
    return ok


def ordinal_direction(points: np.ndarray, levels: np.ndarray,
                      n_angles: int = 7200):
    """Unit 2-D direction whose projection puts the level groups into
    disjoint intervals ordered by level; None when no such direction
    exists.  Scanning the full circle covers both orientations, so for
    two groups this is plain linear separability."""
    pts = np.asarray(points, dtype=np.float64)
    lv = np.asarray(levels)
    uniq = np.unique(lv)
    for theta in np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False):
        w = np.array([np.cos(theta), np.sin(theta)])
        proj = pts @ w
        hi_prev = -np.inf
        for u in uniq:
            grp = proj[lv == u]
            if grp.min() <= hi_prev:
                break
            hi_prev = grp.max()
        else:
            return w
    return None


# -- C1: gradient correctness -----------------------------------------

def _grads_match(g: np.ndarray, gn: np.ndarray) -> bool:
    err = np.abs(g - gn)
    ref = np.maximum(np.abs(g), np.abs(gn))
    return bool(np.all((err <= 1e-4 * ref) | (err <= 1e-8)))


def _numeric(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def _check_case(build, arrays) -> bool:
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    tape = Tape()
    with recording(tape):
        loss = build(*tensors)
    grads = backward(tape, loss)
    for i, a in enumerate(arrays):
        def reval():
            return float(build(*(Tensor(x) for x in arrays)).data)
        gn = _numeric(reval, a)
        if not _grads_match(grads.get(tensors[i]), gn):
            return False
    return True


def _primitive_cases(rng: np.random.Generator):
    def r(*shape):
        return rng.uniform(-1.5, 1.5, size=shape)

    c = float(rng.uniform(0.3, 2.0))
    x_relu = r(4, 3)
    x_relu += np.where(x_relu >= 0, 0.1, -0.1)   # keep clear of the kink
    return [
        ("matmul", lambda a, b: ad.mean(ad.square(ad.matmul(a, b))),
         [r(3, 4), r(4, 2)]),
        ("add", lambda a, b: ad.mean(ad.square(ad.add(a, b))),
         [r(3, 4), r(3, 4)]),
        ("sub", lambda a, b: ad.mean(ad.square(ad.sub(a, b))),
         [r(3, 4), r(3, 4)]),
        ("mul", lambda a, b: ad.mean(ad.square(ad.mul(a, b))),
         [r(3, 4), r(3, 4)]),
        ("scale", lambda a: ad.mean(ad.square(ad.scale(a, c))), [r(5)]),
        ("tanh", lambda a: ad.mean(ad.square(ad.tanh(a))), [r(4, 3)]),
        ("sigmoid", lambda a: ad.mean(ad.square(ad.sigmoid(a))), [r(4, 3)]),
        ("relu", lambda a: ad.mean(ad.square(ad.relu(a))), [x_relu]),
        ("square", lambda a: ad.mean(ad.square(a)), [r(4, 3)]),
        ("mean", lambda a: ad.square(ad.mean(a)), [r(6)]),
        ("reshape", lambda a: ad.mean(ad.square(ad.reshape(a, (3, 4)))),
         [r(2, 6)]),
        ("concat", lambda a, b: ad.mean(ad.square(ad.concat([a, b], axis=1))),
         [r(2, 3), r(2, 2)]),
        ("stack", lambda a, b, g: ad.mean(ad.square(ad.stack([a, b, g]))),
         [r(3), r(3), r(3)]),
        ("narrow", lambda a: ad.mean(ad.square(ad.narrow(a, 1, 1, 2))),
         [r(4, 5)]),
        ("conv2d",
         lambda a, w: ad.mean(ad.square(ad.conv2d(a, w, stride=2, padding=1))),
         [r(2, 2, 6, 6), r(3, 2, 3, 3)]),
        ("conv2d_transpose",
         lambda a, w: ad.mean(ad.square(
             ad.conv2d_transpose(a, w, (6, 6), stride=2, padding=1))),
         [r(2, 3, 3, 3), r(3, 2, 3, 3)]),
        ("batch_norm",
         lambda a, g, b: ad.mean(ad.square(
             ad.batch_norm(a, g, b, BnStats(4), training=True))),
         [r(5, 4), rng.uniform(0.5, 1.5, 4), r(4)]),
    ]


def _full_graph_ok(seed: int) -> bool:
    rng = np.random.default_rng([41, seed])
    cfg = VsnpbConfig(n_s=5, n_u=3, n_p=2)
    net = VsnpbNet(cfg)
    B, T = 2, 3
    arrays = {k: t.data.copy() for k, t in net.init_params(rng).items()}
    param_keys = list(arrays)
    arrays["in.p"] = rng.uniform(-0.5, 0.5, (B, cfg.n_p))
    for t in range(T):
        arrays[f"in.s{t}"] = rng.uniform(-0.8, 0.8, (B, cfg.n_s))
        arrays[f"in.u{t}"] = rng.uniform(-0.8, 0.8, (B, cfg.n_u))
    tgt_s = rng.uniform(-0.8, 0.8, (T, B, cfg.n_s))
    tgt_u = rng.uniform(-0.8, 0.8, (T, B, cfg.n_u))

    def forward(tape=None):
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        params = {k: tensors[k] for k in param_keys}
        ctx = recording(tape) if tape is not None else None
        if ctx is not None:
            ctx.__enter__()
        try:
            hidden = net.zero_hidden(B)
            terms = []
            for t in range(T):
                s_pred, u_pred, hidden = net.step(
                    params, tensors[f"in.s{t}"], tensors[f"in.u{t}"],
                    tensors["in.p"], hidden)
                terms.append(ad.mean(ad.square(ad.sub(s_pred, Tensor(tgt_s[t])))))
                terms.append(ad.mean(ad.square(ad.sub(u_pred, Tensor(tgt_u[t])))))
            loss = ad.mean(ad.stack(terms))
        finally:
            if ctx is not None:
                ctx.__exit__(None, None, None)
        return loss, tensors

    tape = Tape()
    loss, tensors = forward(tape)
    grads = backward(tape, loss)

    # every PB coordinate, plus sampled coordinates from each other input
    coords = [("in.p", i) for i in range(arrays["in.p"].size)]
    for name in sorted(arrays):
        flat = arrays[name].reshape(-1)
        n = min(3, flat.size)
        for i in rng.choice(flat.size, size=n, replace=False):
            coords.append((name, int(i)))
    eps = 1e-6
    for name, idx in coords:
        flat = arrays[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = float(forward()[0].data)
        flat[idx] = orig - eps
        lo = float(forward()[0].data)
        flat[idx] = orig
        gn = (hi - lo) / (2.0 * eps)
        g = grads.get(tensors[name]).reshape(-1)[idx]
        if not _grads_match(np.array([g]), np.array([gn])):
            return False
    return True


def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    seeds = 0
    bad = []
    for rep in range(6):
        cases = _primitive_cases(np.random.default_rng([SEED, rep]))
        for name, build, arrays in cases:
            seeds += 1
            if not _check_case(build, arrays):
                bad.append(f"{name}#{rep}")
    for rep in range(3):
        seeds += 1
        if not _full_graph_ok(rep):
            bad.append(f"full-graph#{rep}")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 60.0
    detail = (f"gradients match central differences (rel 1e-4) over "
              f"{seeds} seeds in {dt:.1f}s"
              + (f"; mismatches: {bad}" if bad else ""))
    assert _verdict(1, ok, detail), detail


# -- C2: simulator reproducibility ------------------------------------

def _run_sequence(sc, state, cmds, with_object: bool, want_frames: bool):
    world = ArmWorld(sc, state)
    if with_object:
        world.place_object(sc.objects["L-25"], 0.24, 0.02, 0.2)
    qs, mids, psis, aps, objs, frames = [], [], [], [], [], []
    for cmd in cmds:
        obs = world.step(cmd)
        qs.append(obs.executed_joints)
        mid, psi = world.closure_point()
        mids.append(mid)
        psis.append(psi)
        aps.append(world.aperture)
        if with_object:
            o = world.objects[0]
            objs.append((o.x, o.y, o.yaw, o.z_center, o.attached))
        if want_frames:
            frames.append(obs.image)
    return (np.stack(qs), np.stack(mids), np.array(psis), np.array(aps),
            objs, frames)


def test_c2_simulator_reproducibility():
    sc = load_default()
    t0 = time.perf_counter()
    state = sc.body_states["c3-j1"]
    home = sc.home_q
    mismatch = []
    for i in range(50):
        rng = np.random.default_rng([SEED, 7, i])
        cmds = [Command(home + rng.uniform(-0.4, 0.4, 6),
                        float(rng.integers(0, 2)))
                for _ in range(12)]
        with_obj = i % 5 == 0
        want_frames = i % 6 == 0
        a = _run_sequence(sc, state, cmds, with_obj, want_frames)
        b = _run_sequence(sc, state, cmds, with_obj, want_frames)
        same = (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                and np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3])
                and a[4] == b[4]
                and all(x.tobytes() == y.tobytes()
                        for x, y in zip(a[5], b[5])))
        if not same:
            mismatch.append(i)

    paths_differ = []
    for sname in ("c1-j0", "c3-j1"):
        world = ArmWorld(sc, sc.body_states[sname])
        spec = sc.objects["L-25"]
        rng = substream(SEED, "acceptance-c2", sname)
        used: set = set()
        for trial in range(2):
            world.spawn_in_gripper(spec)
            x, y, yaw = sample_placement(sc, spec, rng, used)
            ep = collect_episode(world, sc, spec, x, y, yaw,
                                 seed=SEED, trial=trial)
            if not np.array_equal(ep.place_path, ep.pick_path):
                paths_differ.append(f"{sname}#{trial}")
            world.remove_object(spec.name)

    dt = time.perf_counter() - t0
    ok = not mismatch and not paths_differ and dt < 60.0
    detail = (f"50 replays bit-identical, place/pick hand paths coincide "
              f"exactly in {dt:.1f}s"
              + (f"; replay mismatches {mismatch}" if mismatch else "")
              + (f"; path splits {paths_differ}" if paths_differ else ""))
    assert _verdict(2, ok, detail), detail


# -- shared heavyweight pipeline --------------------------------------

@pytest.fixture(scope="session")
def sc():
    return load_default()


@pytest.fixture(scope="session")
def paper_run(sc, tmp_path_factory):
    run = tmp_path_factory.mktemp("acceptance") / "paper-run"
    preset = Preset.from_scenario(sc, "paper")
    times = {}
    for name, stage in (("collect", stage_collect), ("codec", stage_codec),
                        ("model", stage_train)):
        t0 = time.perf_counter()
        stage(run, sc, SEED, preset)
        times[name] = time.perf_counter() - t0
    return {"run": run, "preset": preset, "times": times}


@pytest.fixture(scope="session")
def eval_c5(sc, paper_run):
    run = paper_run["run"]
    stage_eval(run, sc, SEED, states=["c2-j0"],
               objects=list(paper_run["preset"].objects), trials=5,
               modes=("correct", "wrong", "baseline"),
               out_name="acceptance-c5.csv")
    return read_outcomes(run / "eval" / "acceptance-c5.csv")


def test_c3_pb_self_organization(sc, paper_run):
    model = VsnpbModel.load(paper_run["run"] / "model.ckpt")
    names = model.state_names
    pts = model.pb_table
    joint_levels = np.array([int(n[4]) for n in names])
    cam_levels = np.array([int(n[1]) for n in names])
    w_joint = ordinal_direction(pts, joint_levels)
    w_cam = ordinal_direction(pts, cam_levels)
    total = sum(paper_run["times"].values())
    ok = (len(names) == 6 and w_joint is not None and w_cam is not None
          and total < 1200.0)
    detail = (f"PB map: joint grouping separable={w_joint is not None}, "
              f"camera ordering={w_cam is not None} over {len(names)} states; "
              f"pipeline {total:.0f}s (collect {paper_run['times']['collect']:.0f}s, "
              f"codec {paper_run['times']['codec']:.0f}s, "
              f"train {paper_run['times']['model']:.0f}s)")
    assert _verdict(3, ok, detail), detail


def test_c4_online_adaptation(sc, paper_run):
    run = paper_run["run"]
    hits = []
    for state in sc.body_states:
        payload = stage_adapt(run, sc, SEED, state, n_episodes=3)
        hits.append(payload["nearest"] == state)
    ok = all(hits) and len(hits) == 6
    detail = (f"adapter from p=0 lands nearest the trained PB in "
              f"{sum(hits)}/{len(hits)} states")
    assert _verdict(4, ok, detail), detail


def test_c5_servo_outcome_ordering(eval_c5):
    rows = eval_c5
    rc = outcome_rates(rows, mode="correct")["success_rate"]
    rw = outcome_rates(rows, mode="wrong")["success_rate"]
    rb = outcome_rates(rows, mode="baseline")["success_rate"]
    wide = [r for r in rows if r["mode"] == "correct"
            and r["object"] in ("L-25", "S-25")]
    narrow = [r for r in rows if r["mode"] == "correct"
              and r["object"] in ("L-15", "S-15")]
    r_wide = outcome_rates(wide)["success_rate"]
    r_narrow = outcome_rates(narrow)["success_rate"]
    ok = (rc == 1.0 and rw < rc and rb < rw and r_wide >= r_narrow)
    detail = (f"success rates correct={rc:.2f} wrong={rw:.2f} "
              f"baseline={rb:.2f}; wide={r_wide:.2f} narrow={r_narrow:.2f}")
    assert _verdict(5, ok, detail), detail


def test_c6_untrained_state_generalization(sc, paper_run, eval_c5):
    run = paper_run["run"]
    states = ("c1-j0~c2-j1", "c2-j0~c3-j1")
    for state in states:
        stage_adapt(run, sc, SEED, state, n_episodes=3)
    stage_eval(run, sc, SEED, states=list(states),
               objects=["L-25", "S-15"], trials=5, modes=("online",),
               out_name="acceptance-c6.csv")
    rows = read_outcomes(run / "eval" / "acceptance-c6.csv")
    ro = outcome_rates(rows)["success_rate"]
    rc = outcome_rates(eval_c5, mode="correct")["success_rate"]
    rw = outcome_rates(eval_c5, mode="wrong")["success_rate"]
    ok = ro > rw and ro >= rc - 0.20
    detail = (f"online-adapted success on midpoint states={ro:.2f} "
              f"(trained-state correct={rc:.2f}, wrong={rw:.2f})")
    assert _verdict(6, ok, detail), detail


# -- C7: toy-regime oracle --------------------------------------------

def test_c7_toy_regime_oracle():
    t0 = time.perf_counter()
    gains = (0.5, 0.9, 1.3)
    s, u, k, names = make_toy_dataset(gains=gains, n_per_regime=6,
                                      ticks=14, seed=SEED)
    fitted = fit_regime_gains(s, u, k, len(gains))
    oracle_ok = np.allclose(fitted, gains, atol=0.05)

    result = train_vsnpb(s, u, k, names,
                         config=VsnpbConfig(n_s=1, n_u=1, n_p=2),
                         seed=SEED, epochs=150, batch_size=6, lr=3e-3)
    pts = result.model.pb_table
    order = np.argsort(fitted)
    sep = min(np.linalg.norm(pts[i] - pts[j])
              for i in range(3) for j in range(i + 1, 3))
    w = ordinal_direction(pts[order], np.arange(3))
    dt = time.perf_counter() - t0
    ok = oracle_ok and sep > 1e-3 and w is not None and dt < 120.0
    detail = (f"fitted gains {np.round(fitted, 3)} (oracle), PB pairwise "
              f"separation {sep:.3f}, monotone 1-D projection "
              f"{'found' if w is not None else 'missing'} in {dt:.0f}s")
    assert _verdict(7, ok, detail), detail


# -- C8: end-to-end determinism ---------------------------------------

def _smoke_run(out) -> bytes:
    base = ["--out", str(out), "--seed", "11", "--preset", "smoke", "--quiet"]
    steps = [
        ["collect", *base],
        ["train-codec", *base],
        ["train", *base],
        ["adapt", *base, "--state", "c1-j0"],
        ["adapt", *base, "--state", "c1-j1"],
        ["eval", *base, "--states", "c1-j0,c1-j1", "--objects", "L-25",
         "--trials", "2", "--modes", "correct,wrong,baseline,online"],
    ]
    for argv in steps:
        rc = cli_main(argv)
        assert rc == 0, f"step {argv[0]} exited {rc}"
    return (out / "eval" / "outcomes.csv").read_bytes()


def test_c8_end_to_end_determinism(tmp_path):
    t0 = time.perf_counter()
    a = _smoke_run(tmp_path / "a")
    b = _smoke_run(tmp_path / "b")
    dt = time.perf_counter() - t0
    ok = a == b
    detail = (f"two smoke runs, same root seed: outcome CSVs "
              f"{'byte-identical' if ok else 'DIFFER'} "
              f"({len(a)} bytes, {dt:.0f}s for both runs)")
    assert _verdict(8, ok, detail), detail
