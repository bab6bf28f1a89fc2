"""Command-line harness: load a scenario, run it, write CSV metrics and a summary.

Usage::

    python -m digitwin --scenario scenarios/box_push.yaml --out runs/box --seed 0

Exit status is 0 on success, 1 when the scenario cannot be parsed or
validated, and 2 when the run itself fails.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .corrector import (
    CORRECTION_DEDICATED,
    CORRECTION_FOLDED,
    CorrectionGains,
    Tracker,
    iou,
    metrics,
    observe,
)
from .math3d import yaw_of
from .pbd import step
from .planner import GoalPose, PushExecution, RewardParams, plan_sequence, random_goal
from .scene import SceneValidationError, build_scene, scene_from_dict, scene_to_dict
from .splat import render

MODES = ("track", "plan", "sim-only")
STAGES = ("predict", "render", "optimize", "wrench", "step")


class ScenarioError(ValueError):
    """The scenario file could not be parsed or failed validation."""


class MismatchedScenarioError(ValueError):
    pass


# --- scenario file -------------------------------------------------------------------------


@dataclass
class Perturbation:
    """Ground-truth deviations from the twin's physical parameters."""

    density_scale: float = 1.0
    friction_delta: float = 0.0
    bend_stiffness_delta: float = 0.0


@dataclass
class TrackingOptions:
    gains: CorrectionGains = field(default_factory=CorrectionGains)
    correction: str = CORRECTION_DEDICATED
    correct: bool = True
    tracked: list | None = None


@dataclass
class PlanningOptions:
    goals: int = 20
    goal_radius: float = 0.1
    goal_yaw_range: float = math.pi / 3
    budget: int = 128
    population: int = 32
    improvement_threshold: float = 1.0
    max_pushes: int = 6
    reward: RewardParams = field(default_factory=RewardParams)
    speed: float = 0.05
    settle: float = 0.5
    height: float | None = None


@dataclass
class Scenario:
    name: str
    mode: str
    scene: dict
    duration: float
    seed: int = 0
    perturbation: Perturbation = field(default_factory=Perturbation)
    tracking: TrackingOptions = field(default_factory=TrackingOptions)
    planning: PlanningOptions = field(default_factory=PlanningOptions)
    settle_frames: int = 0

    @property
    def identity(self) -> str:
        """Hash of everything that defines the physical experiment (not the tracker settings)."""
        blob = json.dumps({"name": self.name, "scene": self.scene, "duration": self.duration,
                           "perturbation": vars(self.perturbation)}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _section(d, key, cls, where, problems):
    raw = d.get(key) or {}
    if not isinstance(raw, dict):
        problems.append(f"{where}.{key}: expected a mapping")
        return cls()
    names = set(cls.__dataclass_fields__)
    extra = sorted(set(raw) - names)
    if extra:
        problems.append(f"{where}.{key}: unknown field(s) {extra}")
    kwargs = {k: v for k, v in raw.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}.{key}: {exc}")
        return cls()


def parse_scenario(data, source: str = "<scenario>", base_dir: Path | None = None) -> Scenario:
    """Validate a parsed scenario tree, collecting every problem before raising."""
    if not isinstance(data, dict):
        raise ScenarioError(f"{source}: top level must be a mapping")
    problems = []
    known = {"name", "mode", "scene", "scene_file", "duration", "seed", "perturbation", "tracking", "planner",
             "settle_frames"}
    extra = sorted(set(data) - known)
    if extra:
        problems.append(f"{source}: unknown field(s) {extra}")
    mode = data.get("mode")
    if mode not in MODES:
        problems.append(f"{source}.mode: must be one of {list(MODES)}, got {mode!r}")
    scene = data.get("scene")
    if "scene_file" in data:
        path = Path(data["scene_file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            scene = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            problems.append(f"{source}.scene_file: {exc}")
    if not isinstance(scene, dict):
        problems.append(f"{source}.scene: required mapping (inline) or scene_file path")
        scene = None
    else:
        try:
            scene = scene_to_dict(scene_from_dict(scene))
        except SceneValidationError as exc:
            problems.append(f"{source}.scene: {exc}")
    duration = data.get("duration", 1.0 if mode != "plan" else 0.0)
    try:
        duration = float(duration)
        if mode != "plan" and not duration > 0:
            problems.append(f"{source}.duration: must be > 0")
    except (TypeError, ValueError):
        problems.append(f"{source}.duration: not a number: {duration!r}")
        duration = 1.0
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(f"{source}.seed: must be a non-negative integer")
        seed = 0
    settle = data.get("settle_frames", 0)
    if not isinstance(settle, int) or settle < 0:
        problems.append(f"{source}.settle_frames: must be a non-negative integer")
        settle = 0
    pert = _section(data, "perturbation", Perturbation, source, problems)
    if pert.density_scale <= 0:
        problems.append(f"{source}.perturbation.density_scale: must be > 0")
    tracking = _parse_tracking(data.get("tracking") or {}, source, problems)
    planning = _parse_planning(data.get("planner") or {}, source, problems)
    if scene is not None and mode == "plan":
        objs = scene.get("objects", [])
        if len(objs) != 1 or scene.get("ropes") or not scene.get("pusher"):
            problems.append(f"{source}.scene: plan mode needs exactly one object, no ropes and a pusher")
    if scene is not None and mode == "track" and not scene.get("cameras"):
        problems.append(f"{source}.scene.cameras: track mode needs at least one camera")
    if scene is not None and tracking.tracked is not None:
        names = {o["name"] for o in scene.get("objects", [])} | {r["name"] for r in scene.get("ropes", [])}
        missing = sorted(set(tracking.tracked) - names)
        if missing:
            problems.append(f"{source}.tracking.tracked: unknown names {missing}")
    if problems:
        raise ScenarioError("\n".join(problems))
    return Scenario(str(data.get("name", Path(source).stem)), mode, scene, duration, seed, pert, tracking, planning,
                    settle)


def _parse_tracking(raw, source, problems) -> TrackingOptions:
    where = f"{source}.tracking"
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a mapping")
        return TrackingOptions()
    gain_keys = set(CorrectionGains.__dataclass_fields__)
    extra = sorted(set(raw) - gain_keys - {"correction", "correct", "tracked"})
    if extra:
        problems.append(f"{where}: unknown field(s) {extra}")
    try:
        gains = CorrectionGains(**{k: v for k, v in raw.items() if k in gain_keys})
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        gains = CorrectionGains()
    correction = raw.get("correction", CORRECTION_DEDICATED)
    if correction not in (CORRECTION_DEDICATED, CORRECTION_FOLDED):
        problems.append(f"{where}.correction: must be '{CORRECTION_DEDICATED}' or '{CORRECTION_FOLDED}'")
    tracked = raw.get("tracked")
    if tracked is not None and not (isinstance(tracked, list) and all(isinstance(t, str) for t in tracked)):
        problems.append(f"{where}.tracked: expected a list of names")
        tracked = None
    return TrackingOptions(gains, correction, bool(raw.get("correct", True)), tracked)


def _parse_planning(raw, source, problems) -> PlanningOptions:
    where = f"{source}.planner"
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a mapping")
        return PlanningOptions()
    fields = set(PlanningOptions.__dataclass_fields__) - {"reward"}
    extra = sorted(set(raw) - fields - {"reward"})
    if extra:
        problems.append(f"{where}: unknown field(s) {extra}")
    try:
        reward = RewardParams(**(raw.get("reward") or {}))
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}.reward: {exc}")
        reward = RewardParams()
    try:
        opts = PlanningOptions(**{k: v for k, v in raw.items() if k in fields}, reward=reward)
    except TypeError as exc:
        problems.append(f"{where}: {exc}")
        return PlanningOptions()
    if opts.goals < 1 or opts.budget < opts.population or opts.population < 1 or opts.max_pushes < 0:
        problems.append(f"{where}: need goals >= 1, population >= 1, budget >= population, max_pushes >= 0")
    if opts.speed <= 0 or opts.settle < 0:
        problems.append(f"{where}: speed must be > 0 and settle >= 0")
    return opts


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ScenarioError(f"{path}:{loc}: {getattr(exc, 'problem', None) or exc}") from None
    return parse_scenario(data, str(path), path.parent)


# --- report --------------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _stats(values) -> dict:
    v = np.asarray(values, float)
    if v.size == 0:
        return {"mean": 0.0, "std": 0.0, "count": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "count": int(v.size)}


@dataclass
class RunReport:
    """Result of one run: per-frame (or per-push) table, aggregates and stage timings.

    ``columns``/``rows`` hold the main metrics table; ``aggregates`` are
    recomputable from it with :func:`aggregate_table`.
    """

    scenario: str
    identity: str
    mode: str
    seed: int
    columns: list
    rows: list
    aggregates: dict
    timings: dict
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "identity": self.identity, "mode": self.mode, "seed": self.seed,
                "aggregates": self.aggregates, "timings": self.timings, "extra": self.extra}

    @classmethod
    def load(cls, out_dir) -> "RunReport":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "summary.json").read_text())
        table = out_dir / meta["extra"].get("table", "frames.csv")
        columns, rows = [], []
        if table.exists():
            with open(table) as fh:
                reader = csv.DictReader(fh)
                columns = list(reader.fieldnames or [])
                rows = [{k: float(v) for k, v in r.items()} for r in reader]
        return cls(meta["scenario"], meta["identity"], meta["mode"], meta["seed"], columns, rows,
                   meta["aggregates"], meta["timings"], meta["extra"])


def aggregate_table(columns, rows, skip=("frame", "time", "goal", "push")) -> dict:
    """Mean/std/count of every metric column."""
    return {c: _stats([r[c] for r in rows if not math.isnan(float(r[c]))]) for c in columns if c not in skip}


def _empty_timings() -> dict:
    return {s: {"total": 0.0, "mean": 0.0, "count": 0} for s in STAGES}


def _add_timings(acc: dict, stage_times: dict):
    for s, v in stage_times.items():
        acc[s]["total"] += v
        acc[s]["count"] += 1


def _finish_timings(acc: dict) -> dict:
    for s in acc.values():
        s["mean"] = s["total"] / s["count"] if s["count"] else 0.0
    return acc


def compare_runs(a: RunReport, b: RunReport, factor: float = 2.0) -> dict:
    """Per-metric ratio ``a/b`` and difference ``a - b`` of the aggregate means.

    ``improved`` is set for error-like metrics (``te_*``, ``re_*``) when
    ``a`` is lower by at least ``factor`` and for ``iou*`` metrics when
    ``a`` is higher by that factor of the remaining gap to 1.
    """
    if a.identity != b.identity or a.scenario != b.scenario:
        raise MismatchedScenarioError(f"cannot compare {a.scenario}/{a.identity} with {b.scenario}/{b.identity}")
    out = {}
    for key in sorted(set(a.aggregates) & set(b.aggregates)):
        ma, mb = a.aggregates[key]["mean"], b.aggregates[key]["mean"]
        ratio = 1.0 if ma == mb else (ma / mb if mb != 0 else math.inf)
        entry = {"a": ma, "b": mb, "ratio": ratio, "difference": ma - mb}
        if key.startswith(("te_", "re_")):
            entry["improved"] = ma * factor <= mb and ma != mb
        elif key.startswith("iou"):
            entry["improved"] = (1.0 - ma) * factor <= (1.0 - mb) and ma != mb
        out[key] = entry
    return out


# --- runs ----------------------------------------------------------------------------------


def _trajectory_rows(frame, t, label, world):
    rows = []
    for b, name in enumerate(world.body_names):
        x, q = world.body_x[b], world.body_q[b]
        rows.append(dict(frame=frame, time=t, world=label, entity=name, x=x[0], y=x[1], z=x[2],
                         qx=q[0], qy=q[1], qz=q[2], qw=q[3]))
    for r, name in enumerate(world.rod_names):
        ps, _, _ = world.rod_slices(r)
        for k, p in enumerate(range(ps.start, ps.stop)):
            x = world.particle_x[p]
            rows.append(dict(frame=frame, time=t, world=label, entity=f"{name}[{k}]", x=x[0], y=x[1], z=x[2],
                             qx=0.0, qy=0.0, qz=0.0, qw=1.0))
    return rows


TRAJECTORY_COLUMNS = ["frame", "time", "world", "entity", "x", "y", "z", "qx", "qy", "qz", "qw"]


def _dump_images(out: Path, frame: int, cams, truth, twin=None):
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    tp = truth.posed_gaussians()
    wp = twin.posed_gaussians() if twin is not None else None
    for c, cam in enumerate(cams):
        render(tp, cam).save(img_dir / f"frame{frame:05d}_cam{c}_truth.ppm")
        if wp is not None:
            render(wp, cam).save(img_dir / f"frame{frame:05d}_cam{c}_twin.ppm")


def _frames(sc: Scenario, dt: float, override):
    return int(override) if override is not None else max(1, int(round(sc.duration / dt)))


def _run_sim_only(sc: Scenario, out: Path, frames_override, dump_stride) -> RunReport:
    spec = scene_from_dict(sc.scene)
    truth = build_scene(spec, sc.perturbation.density_scale, sc.perturbation.bend_stiffness_delta, sc.seed)
    cfg = spec.sim_config()
    cfg = spec.sim_config(friction=cfg.friction + sc.perturbation.friction_delta)
    frames = _frames(sc, cfg.dt, frames_override)
    traj = _trajectory_rows(0, 0.0, "truth", truth.world)
    timings = _empty_timings()
    for f in range(1, frames + 1):
        clock = time.perf_counter()
        target = truth.pusher_target(truth.world.time + cfg.dt)
        if target is not None:
            truth.world.set_kinematic_target(truth.pusher_body, target)
        step(truth.world, cfg)
        _add_timings(timings, {"step": time.perf_counter() - clock})
        traj += _trajectory_rows(f, truth.world.time, "truth", truth.world)
        if dump_stride and f % dump_stride == 0 and spec.cameras:
            _dump_images(out, f, spec.cameras, truth)
    write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, traj)
    return RunReport(sc.name, sc.identity, sc.mode, sc.seed, [], [], {}, _finish_timings(timings),
                     {"frames": frames, "table": "trajectory.csv"})


def _run_track(sc: Scenario, out: Path, frames_override, dump_stride) -> RunReport:
    spec = scene_from_dict(sc.scene)
    p = sc.perturbation
    truth = build_scene(spec, p.density_scale, p.bend_stiffness_delta, sc.seed)
    twin = build_scene(spec, seed=sc.seed)
    twin_cfg = spec.sim_config()
    truth_cfg = spec.sim_config(friction=twin_cfg.friction + p.friction_delta)
    cams = spec.cameras
    opts = sc.tracking
    tracked = opts.tracked if opts.tracked is not None else list(twin.object_gaussians)
    tracker = Tracker(twin, cams, opts.gains, twin_cfg, opts.correction, opts.correct)
    for _ in range(sc.settle_frames):
        for inst, cfg in ((truth, truth_cfg), (tracker.instance, twin_cfg)):
            step(inst.world, cfg)
    frames = _frames(sc, twin_cfg.dt, frames_override)
    objects = [o.name for o in spec.objects]
    ropes = [r.name for r in spec.ropes]
    columns = (["frame", "time"] + [f"te_{n}" for n in objects] + [f"re_{n}" for n in objects]
               + [f"iou_{n}" for n in ropes] + [f"iou_cam{c}" for c in range(len(cams))]
               + ["loss_before", "loss_after", "force_norm", "torque_norm"])
    rows = []
    traj = _trajectory_rows(0, 0.0, "truth", truth.world) + _trajectory_rows(0, 0.0, "twin", tracker.world)
    timings = _empty_timings()
    for f in range(1, frames + 1):
        target = truth.pusher_target(truth.world.time + truth_cfg.dt)
        if target is not None:
            truth.world.set_kinematic_target(truth.pusher_body, target)
        step(truth.world, truth_cfg)
        obs = observe(truth, cams, tracked, truth.world.time) if opts.correct else None
        diag = tracker.step(obs)
        _add_timings(timings, diag.timings)
        m = metrics(tracker.instance, truth, cams)
        row = {"frame": f, "time": tracker.world.time, "loss_before": diag.loss_before,
               "loss_after": diag.loss_after, "force_norm": diag.force_norm, "torque_norm": diag.torque_norm}
        for n in objects:
            row[f"te_{n}"] = m.translation_error[n]
            row[f"re_{n}"] = m.rotation_error[n]
        for n in ropes:
            row[f"iou_{n}"] = m.iou[n]
        tw_sel = np.sort(np.concatenate([tracker.instance.object_gaussians[n] for n in tracked]))
        gt_sel = np.sort(np.concatenate([truth.object_gaussians[n] for n in tracked]))
        tp = tracker.instance.posed_gaussians().subset(tw_sel)
        gp = truth.posed_gaussians().subset(gt_sel)
        for c, cam in enumerate(cams):
            row[f"iou_cam{c}"] = iou(render(tp, cam).alpha > 0.5, render(gp, cam).alpha > 0.5)
        rows.append(row)
        traj += _trajectory_rows(f, truth.world.time, "truth", truth.world)
        traj += _trajectory_rows(f, tracker.world.time, "twin", tracker.world)
        if dump_stride and f % dump_stride == 0:
            _dump_images(out, f, cams, truth, tracker.instance)
    write_csv(out / "frames.csv", columns, rows)
    write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, traj)
    agg = aggregate_table(columns, rows)
    return RunReport(sc.name, sc.identity, sc.mode, sc.seed, columns, rows, agg, _finish_timings(timings),
                     {"frames": frames, "table": "frames.csv", "correct": opts.correct,
                      "correction_mode": opts.correction})


PUSH_COLUMNS = ["goal", "push", "start_radius", "start_angle", "end_dx", "end_dy", "predicted_reward",
                "position_error", "yaw_error"]
GOAL_COLUMNS = ["goal", "goal_x", "goal_y", "goal_yaw", "pushes", "initial_position_error", "initial_yaw_error",
                "first_reward", "first_position_error", "first_yaw_error", "final_reward", "final_position_error",
                "final_yaw_error"]


def _run_plan(sc: Scenario, out: Path, frames_override, dump_stride) -> RunReport:
    spec = scene_from_dict(sc.scene)
    p = sc.perturbation
    inst = build_scene(spec, p.density_scale, p.bend_stiffness_delta, sc.seed)
    base_cfg = spec.sim_config()
    cfg = spec.sim_config(friction=base_cfg.friction + p.friction_delta)
    world = inst.world
    for _ in range(sc.settle_frames):
        step(world, cfg)
    opts = sc.planning
    ex = PushExecution(opts.speed, opts.settle, opts.height, cfg)
    rng = np.random.default_rng(sc.seed)
    obj = inst.object_bodies[0]
    center = world.body_x[obj, :2].copy()
    yaw0 = yaw_of(world.body_q[obj])
    push_rows, goal_rows = [], []
    timings = _empty_timings()
    for g in range(opts.goals):
        goal: GoalPose = random_goal(rng, center, opts.goal_radius, opts.goal_yaw_range, yaw0)
        w = world.copy()
        clock = time.perf_counter()
        res = plan_sequence(w, goal, opts.reward, opts.improvement_threshold, opts.max_pushes, opts.budget,
                            opts.population, sc.seed + 7 * g, ex)
        _add_timings(timings, {"optimize": time.perf_counter() - clock})
        for rec in res.pushes:
            a = rec.action
            push_rows.append(dict(goal=g, push=rec.index, start_radius=a.start_radius, start_angle=a.start_angle,
                                  end_dx=a.end_dx, end_dy=a.end_dy, predicted_reward=rec.predicted_reward,
                                  position_error=rec.position_error, yaw_error=rec.yaw_error))
        first = res.pushes[0] if res.pushes else None
        last = res.pushes[-1] if res.pushes else None
        nan = float("nan")
        goal_rows.append(dict(
            goal=g, goal_x=goal.position[0], goal_y=goal.position[1], goal_yaw=goal.yaw, pushes=len(res.pushes),
            initial_position_error=res.initial_position_error, initial_yaw_error=res.initial_yaw_error,
            first_reward=first.predicted_reward if first else nan,
            first_position_error=first.position_error if first else res.initial_position_error,
            first_yaw_error=first.yaw_error if first else res.initial_yaw_error,
            final_reward=last.predicted_reward if last else nan,
            final_position_error=res.final_position_error, final_yaw_error=res.final_yaw_error))
    write_csv(out / "pushes.csv", PUSH_COLUMNS, push_rows)
    write_csv(out / "goals.csv", GOAL_COLUMNS, goal_rows)
    agg = aggregate_table(GOAL_COLUMNS, goal_rows, skip=("goal", "goal_x", "goal_y", "goal_yaw"))
    table = {}
    for label, pre in (("first push", "first"), ("last push", "final")):
        table[label] = {
            "reward": agg[f"{pre}_reward"],
            "position_error_cm": {k: (v * 100 if k != "count" else v)
                                  for k, v in agg[f"{pre}_position_error"].items()},
            "yaw_error_rad": agg[f"{pre}_yaw_error"],
        }
    return RunReport(sc.name, sc.identity, sc.mode, sc.seed, GOAL_COLUMNS, goal_rows, agg, _finish_timings(timings),
                     {"goals": opts.goals, "table": "goals.csv", "planner_table": table})


def run_scenario(path, overrides: dict | None = None) -> RunReport:
    """Run the scenario at ``path`` and write its outputs.

    ``overrides`` may set ``seed``, ``out``, ``frames``, ``dump_images``
    (stride, 0 = off) and ``mode``. The output directory defaults to
    ``runs/<scenario name>``.
    """
    overrides = dict(overrides or {})
    sc = load_scenario(path)
    if overrides.get("mode") is not None:
        if overrides["mode"] not in MODES:
            raise ScenarioError(f"--mode: must be one of {list(MODES)}")
        sc = parse_scenario({**yaml.safe_load(Path(path).read_text()), "mode": overrides["mode"]}, str(path),
                            Path(path).parent)
    if overrides.get("seed") is not None:
        sc.seed = int(overrides["seed"])
    frames = overrides.get("frames")
    if frames is not None and int(frames) < 1:
        raise ScenarioError("--frames: must be >= 1")
    stride = int(overrides.get("dump_images") or 0)
    if stride < 0:
        raise ScenarioError("--dump-images: stride must be >= 0")
    return run(sc, overrides.get("out"), frames, stride)


def run(sc: Scenario, out=None, frames: int | None = None, dump_images: int = 0) -> RunReport:
    """Run an already parsed scenario, writing its CSVs and ``summary.json`` under ``out``."""
    out = Path(out or Path("runs") / sc.name)
    out.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    runner = {"track": _run_track, "plan": _run_plan, "sim-only": _run_sim_only}[sc.mode]
    report = runner(sc, out, frames, dump_images)
    (out / "summary.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True, default=float) + "\n")
    return report


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="digitwin", description="Run a digital-twin scenario (track, plan or sim-only).",
                allow_abbrev=False)
    p.add_argument("--scenario", required=True, metavar="PATH", help="scenario YAML file")
    p.add_argument("--seed", type=int, default=None, metavar="N", help="override the scenario seed")
    p.add_argument("--out", default=None, metavar="DIR", help="output directory (default runs/<name>)")
    p.add_argument("--frames", type=int, default=None, metavar="N", help="override the number of frames")
    p.add_argument("--dump-images", type=int, default=0, metavar="STRIDE",
                   help="write P6 images every STRIDE frames (0 = off)")
    p.add_argument("--mode", choices=MODES, default=None, help="override the scenario mode")
    return p


def _summary_lines(report: RunReport):
    yield f"scenario {report.scenario} ({report.mode}, seed {report.seed})"
    for k, v in report.aggregates.items():
        if k.startswith(("te_", "re_", "iou", "final_", "pushes")):
            yield f"  {k}: {v['mean']:.6g} ± {v['std']:.3g}"
    for s, v in report.timings.items():
        if v["count"]:
            yield f"  time {s}: {1000 * v['mean']:.2f} ms x {v['count']}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "frames": args.frames, "dump_images": args.dump_images,
                 "mode": args.mode}
    try:
        report = run_scenario(args.scenario, overrides)
    except (ScenarioError, SceneValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure during the run maps to exit status 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for line in _summary_lines(report):
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
