"""Command-line pipeline: demo generation, STM training, rollout, smoothing,
evaluation, IDM training, torque tracking and the synthesis benchmark.

Every command is reproducible from (config file, seed) alone; the fully
resolved config is written beside each output.  All CSVs carry headers.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import arm as arm_world
from . import idm as idm_mod
from . import stm as stm_mod
from . import trajopt
from .core import Rng

DEFAULT_CONFIG = {
    "seed": 0,
    "arm": {"link_lengths": [0.5, 0.3, 0.2], "inertia": 1.0, "damping": 0.5,
            "dt": 0.01},
    "task": {"kind": "reacher"},
    "stm": {"layers": 3, "hidden": 64, "mixtures": 3, "lr": 1e-3,
            "iterations": 5000, "clip_norm": 5.0, "normalize": True},
    "schedule": {"u": 5, "v": 5},
    "trajopt": {"gamma": 0.5, "eta": 0.05, "iterations": 200,
                "fixed_endpoints": True, "reanchor": False, "beta": 0.0},
    "idm": {"history": 2, "hidden": [64, 64, 64], "mixtures": 5,
            "substeps": 10, "lr": 1e-3, "iterations": 3000, "batch": 64,
            "clip_norm": 5.0, "torque_range": 2.0, "episode_len": 40,
            "transitions": 4000},
    "rollout": {"steps": 70},
    "eval": {"rollouts": 20},
    "circle": {"center": [0.5, 0.2], "steps": 80,
               "radii": [round(0.05 + i * 0.15 / 9, 6) for i in range(10)]},
}

VARIANTS = {
    "lstm": {"head": "linear", "auto_condition": False},
    "ac_lstm": {"head": "linear", "auto_condition": True},
    "lstm_mdn": {"head": "mdn", "auto_condition": False},
    "ac_lstm_mdn": {"head": "mdn", "auto_condition": True},
}


class CliError(RuntimeError):
    pass


def _merge(base, override, path=""):
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise CliError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise CliError(f"config section {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path):
    if path is None:
        return dict(DEFAULT_CONFIG)
    with open(path) as f:
        user = json.load(f)
    return _merge(DEFAULT_CONFIG, user)


def _fmt(v):
    if isinstance(v, float) or isinstance(v, np.floating):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    os.replace(tmp, path)


def _log_resolved_config(cfg, out_path):
    with open(out_path + ".config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _arm_from_cfg(cfg):
    return arm_world.ArmConfig.from_dict(cfg["arm"])


def _stm_cfg(cfg, seed, variant="ac_lstm_mdn"):
    v = VARIANTS[variant]
    sched = stm_mod.ScheduleConfig(cfg["schedule"]["u"], cfg["schedule"]["v"]) \
        if v["auto_condition"] else stm_mod.ScheduleConfig(u=1, v=0)
    s = cfg["stm"]
    return stm_mod.StmConfig(
        layers=s["layers"], hidden=s["hidden"], mixtures=s["mixtures"],
        lr=s["lr"], iterations=s["iterations"], clip_norm=s["clip_norm"],
        schedule=sched, seed=seed, normalize=s["normalize"], head=v["head"],
    )


# ---------------------------------------------------------------------------
# commands

def cmd_gen_demos(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    arm = _arm_from_cfg(cfg)
    rng = Rng(seed)
    if args.task == "reacher":
        demos = arm_world.gen_reacher_demos(args.count, arm, rng)
    elif args.task == "circle":
        c = cfg["circle"]
        demos = arm_world.gen_circle_demos(c["radii"], arm, rng,
                                           center=c["center"], steps=c["steps"])
    elif args.task == "pick_place":
        demos = arm_world.gen_pickplace_demos(args.count, arm, rng)
    else:
        raise CliError(f"unknown task {args.task!r}")
    stm_mod.save_dataset(args.out, demos, arm)
    _log_resolved_config(cfg, args.out)
    lengths = [len(d) for d in demos]
    print(f"wrote {len(demos)} trajectories to {args.out} "
          f"(lengths {min(lengths)}..{max(lengths)})")
    return 0


def cmd_train_stm(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    dataset, arm = stm_mod.load_dataset(args.dataset)
    scfg = _stm_cfg(cfg, seed, args.variant)
    if args.iterations is not None:
        scfg.iterations = args.iterations
    ckpt = stm_mod.train(dataset, scfg, arm)
    stm_mod.save_checkpoint(ckpt, args.out)
    _log_resolved_config(cfg, args.out)
    write_csv(args.out + "_loss.csv", ["iteration", "loss"],
              [(i, l) for i, l in enumerate(ckpt.loss_curve)])
    print(f"trained {args.variant} for {scfg.iterations} iterations; "
          f"final loss {ckpt.loss_curve[-1]:.4f}; checkpoint {args.out}")
    return 0


def _parse_goal_at(items):
    sched = []
    for it in items or []:
        try:
            step, coords = it.split(":")
            vals = np.array([float(x) for x in coords.split(",")])
            sched.append((int(step), vals))
        except ValueError as e:
            raise CliError(f"malformed --goal-at {it!r} (want STEP:X,Y)") from e
    return sched


def _rollout_task(cfg, ckpt, rng, arm, goal=None, radius=None):
    kind = cfg["task"]["kind"]
    if kind == "circle":
        r = radius if radius is not None else rng.uniform(0.05, 0.20)
        center = np.asarray(cfg["circle"]["center"], dtype=np.float64)
        task = arm_world.TaskSpec(kind="circle", radius=float(r), center=center)
        start = center + np.array([r, 0.0])
        q0 = arm_world.ik_solve(start, np.full(arm.n, 0.6), arm, tol=1e-6,
                                max_iters=500)
    else:
        if goal is not None:
            q0 = arm_world.sample_start(rng, arm)
            g = np.asarray(goal, dtype=np.float64)
        else:
            q0, g = arm_world.sample_reach_pair(rng, arm)
        task = arm_world.TaskSpec(kind=kind, goal=g)
    return task, q0


def cmd_rollout(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    arm = _arm_from_cfg(cfg)
    ckpt = stm_mod.load_checkpoint(args.checkpoint)
    rng = Rng(seed)
    goal = np.array([float(x) for x in args.goal.split(",")]) if args.goal else None
    q0 = (np.array([float(x) for x in args.start_q.split(",")])
          if args.start_q else None)
    task, q0_auto = _rollout_task(cfg, ckpt, rng, arm, goal=goal,
                                  radius=args.radius)
    if q0 is None:
        q0 = q0_auto
    sched = _parse_goal_at(args.goal_at)
    steps = args.steps if args.steps is not None else cfg["rollout"]["steps"]
    traj = stm_mod.rollout(ckpt, q0, task, steps, goal_schedule=sched, arm=arm,
                           rng=rng, stochastic=args.stochastic)
    stm_mod.save_dataset(args.out, [traj], arm)
    _log_resolved_config(cfg, args.out)
    qs = traj.joint_angles()
    rows = []
    for t, q in enumerate(qs):
        ee = arm_world.forward_kinematics(q, arm)
        rows.append((t, ee[0], ee[1]) + tuple(q))
    write_csv(args.out + "_ee.csv",
              ["step", "ee_x", "ee_y"] + [f"q{j}" for j in range(arm.n)], rows)
    ok = arm_world.success_check(traj, task, arm)
    print(f"rollout of {steps} steps written to {args.out}; success={ok}")
    return 0


def cmd_smooth(args):
    cfg = load_config(args.config)
    trajs, arm = stm_mod.load_dataset(args.traj)
    traj = trajs[0]
    t = cfg["trajopt"]
    goal = traj.task.goal if t["beta"] > 0 else None
    scfg = trajopt.SmoothConfig(
        gamma=args.gamma if args.gamma is not None else t["gamma"],
        eta=args.eta if args.eta is not None else t["eta"],
        iterations=args.iterations if args.iterations is not None else t["iterations"],
        fixed_endpoints=t["fixed_endpoints"] and not args.free_endpoints,
        reanchor=t["reanchor"] or args.reanchor,
        beta=t["beta"], goal=goal, arm=arm,
    )
    skeleton = traj.joint_angles()
    out_q, history = trajopt.smooth(skeleton, scfg)
    # rebuild a trajectory with the smoothed joint path
    states = []
    prev = out_q[0]
    for q in out_q:
        s, _ = stm_mod.recompute_feedback(q - prev, prev, traj.task, arm,
                                          grip=traj.states[0].grip)
        states.append(s)
        prev = q
    smoothed = stm_mod.Trajectory(states=states, task=traj.task, q0=out_q[0].copy())
    stm_mod.save_dataset(args.out, [smoothed], arm)
    _log_resolved_config(cfg, args.out)
    write_csv(args.out + "_cost.csv", ["iteration", "cost"],
              [(i, c) for i, c in enumerate(history)])
    print(f"smoothed trajectory written to {args.out}; "
          f"cost {history[0]:.5f} -> {history[-1]:.5f}")
    return 0


def run_eval(ckpt, cfg, arm, rollouts, seed, steps=None, goal_switch_at=None):
    """Seeded evaluation rollouts; returns (rate, rows for the detail CSV)."""
    rows = []
    successes = 0
    steps = steps if steps is not None else cfg["rollout"]["steps"]
    base = Rng(seed)
    for i in range(rollouts):
        rng = base.derive(i)
        task, q0 = _rollout_task(cfg, ckpt, rng, arm)
        sched = []
        if goal_switch_at is not None and task.kind != "circle":
            sched = [(goal_switch_at, arm_world._sample_goal(rng, arm))]
        traj = stm_mod.rollout(ckpt, q0, task, steps, goal_schedule=sched,
                               arm=arm, rng=rng)
        ok = arm_world.success_check(traj, traj.task, arm)
        successes += int(ok)
        ee = arm_world.forward_kinematics(traj.joint_angles()[-1], arm)
        if traj.task.kind == "circle":
            dist = abs(np.linalg.norm(ee - traj.task.center) - traj.task.radius)
        else:
            dist = float(np.linalg.norm(ee - traj.task.goal))
        rows.append((i, int(ok), dist))
    return successes / rollouts, rows


def cmd_eval(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    arm = _arm_from_cfg(cfg)
    ckpt = stm_mod.load_checkpoint(args.checkpoint)
    n = args.rollouts if args.rollouts is not None else cfg["eval"]["rollouts"]
    rate, rows = run_eval(ckpt, cfg, arm, n, seed, steps=args.steps,
                          goal_switch_at=args.goal_switch_at)
    if args.out:
        write_csv(args.out, ["rollout", "success", "final_error"], rows)
        _log_resolved_config(cfg, args.out)
    print(f"success rate: {rate:.0%} over {n} rollouts (seed {seed})")
    return 0


def cmd_train_idm(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    arm = _arm_from_cfg(cfg)
    c = cfg["idm"]
    icfg = idm_mod.IdmConfig(
        history=c["history"], hidden=tuple(c["hidden"]), mixtures=c["mixtures"],
        substeps=c["substeps"], lr=c["lr"], iterations=c["iterations"],
        batch=c["batch"], clip_norm=c["clip_norm"],
        torque_range=c["torque_range"], episode_len=c["episode_len"], seed=seed,
    )
    rng = Rng(seed)
    transitions = idm_mod.collect_transitions(
        arm, c["transitions"], rng, history=icfg.history,
        torque_range=icfg.torque_range, episode_len=icfg.episode_len,
    )
    ckpt = idm_mod.train_idm(transitions, icfg)
    idm_mod.save_idm_checkpoint(ckpt, args.out)
    _log_resolved_config(cfg, args.out)
    write_csv(args.out + "_loss.csv", ["iteration", "loss"],
              [(i, l) for i, l in enumerate(ckpt.loss_curve)])
    print(f"trained IDM on {len(transitions)} transitions; "
          f"final loss {ckpt.loss_curve[-1]:.4f}; checkpoint {args.out}")
    return 0


def cmd_track(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    arm = _arm_from_cfg(cfg)
    stm_ckpt = stm_mod.load_checkpoint(args.stm)
    idm_ckpt = idm_mod.load_idm_checkpoint(args.idm) if args.idm else None
    if idm_ckpt is None and not args.oracle:
        raise CliError("need --idm CHECKPOINT or --oracle")
    rng = Rng(seed)
    task, q0 = _rollout_task(cfg, stm_ckpt, rng, arm)
    steps = args.steps if args.steps is not None else cfg["rollout"]["steps"]
    traj = stm_mod.rollout(stm_ckpt, q0, task, steps, arm=arm, rng=rng)
    desired = traj.joint_angles()
    substeps = args.substeps if args.substeps is not None else cfg["idm"]["substeps"]
    executed, errors, torques = idm_mod.track(
        desired, idm_ckpt, arm, substeps=substeps, oracle=args.oracle,
        history=cfg["idm"]["history"],
    )
    rows = []
    for t in range(len(errors)):
        rows.append((t,) + tuple(desired[t + 1]) + tuple(executed[t + 1])
                    + tuple(torques[(t + 1) * substeps - 1]) + (errors[t],))
    n = arm.n
    header = (["step"] + [f"desired_q{j}" for j in range(n)]
              + [f"actual_q{j}" for j in range(n)]
              + [f"torque{j}" for j in range(n)] + ["error_norm"])
    write_csv(args.out, header, rows)
    _log_resolved_config(cfg, args.out)
    print(f"tracked {len(errors)} STM steps (substeps={substeps}, "
          f"oracle={args.oracle}); max error {max(errors):.2e} rad; {args.out}")
    return 0


def cmd_bench(args):
    cfg = load_config(args.config)
    arm = _arm_from_cfg(cfg)
    ckpt = stm_mod.load_checkpoint(args.checkpoint)
    c = cfg["circle"]
    center = np.asarray(c["center"], dtype=np.float64)
    steps = c["steps"]
    radius = args.radius if args.radius is not None else 0.12
    task = arm_world.TaskSpec(kind="circle", radius=radius, center=center)
    q0 = arm_world.ik_solve(center + np.array([radius, 0.0]),
                            np.full(arm.n, 0.6), arm, tol=1e-6, max_iters=500)

    def run_stm():
        stm_mod.rollout(ckpt, q0, task, steps, arm=arm)

    def run_ik():
        thetas = np.linspace(0.0, 2 * np.pi, steps + 1)
        pts = center[None, :] + radius * np.stack(
            [np.cos(thetas), np.sin(thetas)], axis=1)
        arm_world._track_cartesian(pts[1:], q0, arm, tol=1e-6)

    def best_time(fn):
        best = float("inf")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best

    t_stm = best_time(run_stm)
    t_ik = best_time(run_ik)
    report = {
        "radius": radius, "steps": steps,
        "stm_seconds": t_stm, "ik_seconds": t_ik,
        "ratio_ik_over_stm": t_ik / t_stm,
    }
    print(json.dumps(report, indent=2))
    if args.out:
        write_csv(args.out, ["metric", "value"],
                  [(k, v) for k, v in report.items()])
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="armstm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("gen-demos", help="generate expert demonstrations")
    common(sp)
    sp.add_argument("--task", required=True,
                    choices=["reacher", "circle", "pick_place"])
    sp.add_argument("--count", type=int, default=45)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_demos)

    sp = sub.add_parser("train-stm", help="train a state transition model")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", default="ac_lstm_mdn", choices=sorted(VARIANTS))
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(fn=cmd_train_stm)

    sp = sub.add_parser("rollout", help="unroll a trained model")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--goal", help="X,Y goal (reacher/pick_place)")
    sp.add_argument("--radius", type=float, help="circle radius")
    sp.add_argument("--start-q", dest="start_q", help="comma-separated joints")
    sp.add_argument("--goal-at", dest="goal_at", action="append",
                    metavar="STEP:X,Y", help="online goal change (repeatable)")
    sp.add_argument("--stochastic", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_rollout)

    sp = sub.add_parser("smooth", help="smooth a trajectory")
    common(sp)
    sp.add_argument("--traj", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--free-endpoints", action="store_true")
    sp.add_argument("--reanchor", action="store_true")
    sp.set_defaults(fn=cmd_smooth)

    sp = sub.add_parser("eval", help="success rate over seeded rollouts")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--rollouts", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--goal-switch-at", dest="goal_switch_at", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("train-idm", help="train an inverse dynamics model")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_idm)

    sp = sub.add_parser("track", help="follow an STM trajectory with torques")
    common(sp)
    sp.add_argument("--stm", required=True)
    sp.add_argument("--idm")
    sp.add_argument("--oracle", action="store_true",
                    help="use the analytic inverse dynamics")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--substeps", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_track)

    sp = sub.add_parser("bench", help="STM vs IK circle synthesis timing")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--radius", type=float)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
