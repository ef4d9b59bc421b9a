"""Batch driver: generate worlds, run pipelines (single recipes or the full ablation grid), aggregate reports.

    ifsdlab generate SPEC [--force]
    ifsdlab run SPEC [--grid] [--force]
    ifsdlab run --manifest RUN_DIR/manifest.json [--force]
    ifsdlab report RUN_DIR [RUN_DIR ...] [--out DIR]

Spec files are JSON. The output root comes from the spec's ``output_dir`` unless the
IFSDLAB_OUTPUT_ROOT environment variable is set.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import statistics
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path


from .checkpoint import CheckpointError, save_checkpoint
from .core import TaskMode, load_split, sequence_from_text, sequence_to_text, split_to_text
from .detector import TransferStrategy
from .evaluation import EvalReport
from .training import (
    ExemplarMethod,
    NumericalError,
    SessionRecipe,
    TrainConfig,
    exemplar_split,
    pretrain,
    run_task_sequence,
    select_exemplars,
    trace_csv,
)
from .world import WorldConfig, generate_world, proposal_inconsistencies

log = logging.getLogger("ifsdlab")

OUTPUT_ENV = "IFSDLAB_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CADENCES = ("session", "final")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()


def code_version() -> str:
    """Hash of the package sources, so a manifest pins the code that produced it."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentSpec:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    recipe: SessionRecipe = field(default_factory=SessionRecipe)
    mode: TaskMode = TaskMode.TYPICAL
    cadence: str = "session"
    output_dir: str = "ifsdlab-out"
    seeds: tuple[int, ...] = (0,)
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cadence not in CADENCES:
            raise ConfigError(f"cadence must be one of {CADENCES}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list without repeats")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "train": self.train.to_dict(),
            "recipe": self.recipe.to_dict(),
            "mode": self.mode.value,
            "cadence": self.cadence,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "dims": dict(self.dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {"world", "train", "recipe", "mode", "cadence", "output_dir", "seeds", "dims"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown spec fields: {sorted(extra)}")
        try:
            return cls(
                world=WorldConfig.from_dict(d.get("world", {})),
                train=TrainConfig(**d.get("train", {})),
                recipe=SessionRecipe.from_dict({**SessionRecipe().to_dict(), **d.get("recipe", {})}),
                mode=TaskMode(d.get("mode", "typical")),
                cadence=d.get("cadence", "session"),
                output_dir=d.get("output_dir", "ifsdlab-out"),
                seeds=tuple(int(s) for s in d.get("seeds", [0])),
                dims=dict(d.get("dims", {})),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid spec: {e}") from e

    def for_seed(self, seed: int) -> "ExperimentSpec":
        return replace(self, seeds=(seed,), world=replace(self.world, seed=seed),
                       train=replace(self.train, seed=seed))

    def run_key(self) -> dict:
        """Everything that determines a single run's numbers (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    def config_hash(self) -> str:
        return _sha(_canonical(self.run_key()))[:12]

    def group_hash(self) -> str:
        """Hash of the run key without seeds; runs sharing it aggregate together."""
        d = self.run_key()
        d.pop("seeds")
        d["world"] = {k: v for k, v in d["world"].items() if k != "seed"}
        d["train"] = {k: v for k, v in d["train"].items() if k != "seed"}
        return _sha(_canonical(d))[:12]


def load_spec(path: str | Path) -> ExperimentSpec:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"spec file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"spec is not valid JSON: {e}") from e
    return ExperimentSpec.from_dict(d)


def output_root(spec: ExperimentSpec) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or spec.output_dir)


def ablation_grid(spec: ExperimentSpec) -> list[ExperimentSpec]:
    """The 3 strategies x {with, without distillation} x 4 exemplar choices."""
    out = []
    for strat, d, m in itertools.product(TransferStrategy, (False, True), ExemplarMethod):
        out.append(replace(spec, recipe=replace(spec.recipe, strategy=strat, use_distillation=d, exemplar_method=m)))
    return out


# ---------------------------------------------------------------------------
# generate

def _world_hash(world: WorldConfig) -> str:
    d = world.to_dict()
    d.pop("seed")
    return _sha(_canonical(d))[:12]


def dataset_dir(root: Path, world: WorldConfig) -> Path:
    return root / "data" / _world_hash(world) / f"seed-{world.seed}"


def _write_files(directory: Path, files: dict[str, bytes], force: bool) -> None:
    if directory.exists() and any(directory.iterdir()) and not force:
        raise DataError(f"{directory} already exists; pass --force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        (directory / name).write_bytes(data)


def generate_dataset(world_cfg: WorldConfig, directory: Path, force: bool = False) -> dict:
    world = generate_world(world_cfg)
    seq = world.sequence
    bad = proposal_inconsistencies(world.base) + proposal_inconsistencies(world.test)
    for s in seq.sessions:
        bad += proposal_inconsistencies(s.shots)
    if bad:
        raise DataError(f"{len(bad)} proposal inconsistencies, first: {bad[0]}")
    files = {
        "base.jsonl": split_to_text(world.base).encode(),
        "sequence.jsonl": sequence_to_text(seq).encode(),
        "test.jsonl": split_to_text(world.test).encode(),
    }
    manifest = {
        "world": world_cfg.to_dict(),
        "code_version": code_version(),
        "files": {k: _sha(v) for k, v in files.items()},
        "novel_annotations": sum(1 for s in seq.sessions for _ in s.shots.annotations()),
    }
    files["manifest.json"] = (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
    _write_files(directory, files, force)
    return manifest


def cmd_generate(spec: ExperimentSpec, force: bool = False) -> list[Path]:
    root = output_root(spec)
    dirs = []
    for seed in spec.seeds:
        d = dataset_dir(root, replace(spec.world, seed=seed))
        generate_dataset(replace(spec.world, seed=seed), d, force)
        log.info("wrote %s", d)
        dirs.append(d)
    return dirs


def load_dataset(directory: Path):
    try:
        base = load_split(directory / "base.jsonl")
        seq = sequence_from_text((directory / "sequence.jsonl").read_text())
        test = load_split(directory / "test.jsonl")
    except FileNotFoundError as e:
        raise DataError(f"dataset missing under {directory}; run `generate` first") from e
    except (ValueError, KeyError, IndexError) as e:
        raise DataError(f"corrupt dataset under {directory}: {e}") from e
    return base, seq, test


# ---------------------------------------------------------------------------
# run

def run_dir(root: Path, spec: ExperimentSpec) -> Path:
    return root / "runs" / spec.config_hash()


def execute_run(spec: ExperimentSpec, root: Path, force: bool = False) -> Path:
    """One seed, one recipe: pretrain, transfer through the sequence, write everything."""
    if len(spec.seeds) != 1:
        raise ConfigError("execute_run takes a single-seed spec")
    seed = spec.seeds[0]
    base, seq, test = load_dataset(dataset_dir(root, spec.world))
    seq = seq.as_mode(spec.mode)
    state, pre_trace = pretrain(base, spec.train, dims=spec.dims or None)
    k = spec.world.shots_K
    exemplars = select_exemplars(state, base, spec.recipe.exemplar_method, k, seed, spec.recipe.exemplar_layer)
    memory = exemplar_split(exemplars, base)
    results = run_task_sequence(state, seq, spec.recipe, spec.train, test, memory,
                                evaluate_each=spec.cadence == "session")

    out = run_dir(root, spec)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"{out} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "pretrain.ckpt", state)
    trace = list(pre_trace)
    sessions = []
    for r in results:
        # the session's distillation targets travel with its checkpoint
        save_checkpoint(out / f"session-{r.index}.ckpt", r.state, r.store)
        if r.report is not None:
            (out / f"session-{r.index}.report.json").write_text(r.report.to_text())
        trace.extend(r.trace)
        sessions.append({"index": r.index, "classes": list(r.state.classes),
                         "old_classes": None if r.old_classes is None else list(r.old_classes),
                         "evaluated": r.report is not None})
    (out / "trace.csv").write_text(trace_csv(trace))
    if exemplars is not None:
        (out / "exemplars.json").write_text(exemplars.to_text())
    digests = {p.name: _sha(p.read_bytes()) for p in sorted(out.iterdir()) if p.name != "manifest.json"}
    manifest = {
        "spec": spec.to_dict(),
        "config_hash": spec.config_hash(),
        "group_hash": spec.group_hash(),
        "label": spec.recipe.label,
        "seeds": list(spec.seeds),
        "sessions": sessions,
        "code_version": code_version(),
        "files": digests,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def cmd_run(spec: ExperimentSpec, grid: bool = False, force: bool = False) -> list[Path]:
    root = output_root(spec)
    specs = ablation_grid(spec) if grid else [spec]
    out = []
    for s in specs:
        for seed in s.seeds:
            d = execute_run(s.for_seed(seed), root, force)
            log.info("%s seed %d -> %s", s.recipe.label, seed, d)
            out.append(d)
    return out


def replay_manifest(path: str | Path, force: bool = False) -> Path:
    """Re-execute a run from its manifest; the world is regenerated if it is missing."""
    m = json.loads(Path(path).read_text())
    spec = ExperimentSpec.from_dict(m["spec"])
    if m.get("code_version") != code_version():
        log.warning("manifest was produced by code version %s, running %s", m.get("code_version"), code_version())
    root = output_root(spec)
    data = dataset_dir(root, spec.world)
    if not (data / "manifest.json").exists():
        generate_dataset(spec.world, data)
    return execute_run(spec, root, force)


# ---------------------------------------------------------------------------
# report

def _load_run(d: Path) -> tuple[dict, list[EvalReport | None]]:
    try:
        m = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{d} is not a run directory (no manifest.json)") from e
    reports = []
    for s in m["sessions"]:
        p = d / f"session-{s['index']}.report.json"
        reports.append(EvalReport.from_dict(json.loads(p.read_text())) if p.exists() else None)
    return m, reports


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    # exact rational arithmetic: identical runs give their value back and a spread of exactly 0
    return float(statistics.mean(vals)), float(statistics.pstdev(vals))


def _fmt(v):
    return "" if v is None else repr(v)


def cmd_report(run_dirs, out_dir: str | Path | None = None) -> dict[str, str]:
    """Mean and std over seeds per configuration, plus per-session HM series.

    Runs are grouped by recipe label; runs sharing a label must share every other setting.
    """
    groups: dict[str, list] = {}
    for d in run_dirs:
        m, reports = _load_run(Path(d))
        groups.setdefault(m["label"], []).append((m, reports))
    header = ["label", "group_hash", "n_runs"]
    for f in EvalReport.FIELDS:
        header += [f + "_mean", f + "_std"]
    table = [",".join(header)]
    series = ["label,session,hm_ap_mean,hm_ap_std,hm_ar_mean,hm_ar_std"]
    for label, runs in sorted(groups.items()):
        hashes = {m["group_hash"] for m, _ in runs}
        if len(hashes) > 1:
            raise ConfigError(f"runs labelled {label} come from incompatible specs: {sorted(hashes)}")
        lengths = {len(r) for _, r in runs}
        if len(lengths) > 1:
            raise ConfigError(f"runs labelled {label} have different session counts")
        finals = [r[-1] for _, r in runs]
        row = [label, hashes.pop(), str(len(runs))]
        for f in EvalReport.FIELDS:
            row += [_fmt(v) for v in _stats([None if r is None else getattr(r, f) for r in finals])]
        table.append(",".join(row))
        for i in range(lengths.pop()):
            at = [r[i] for _, r in runs]
            ap = _stats([None if r is None else r.hm_ap for r in at])
            ar = _stats([None if r is None else r.hm_ar for r in at])
            series.append(",".join([label, str(i + 1)] + [_fmt(v) for v in ap + ar]))
    out = {"table.csv": "\n".join(table) + "\n", "series.csv": "\n".join(series) + "\n"}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        for name, text in out.items():
            (Path(out_dir) / name).write_text(text)
    return out


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ifsdlab", description="incremental few-shot detection toy experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="write base split, task sequence and test split for every seed")
    g.add_argument("spec")
    g.add_argument("--force", action="store_true", help="overwrite existing dataset files")
    r = sub.add_parser("run", help="pretrain and transfer; one run directory per recipe and seed")
    r.add_argument("spec", nargs="?")
    r.add_argument("--grid", action="store_true", help="run all 24 strategy/distillation/exemplar recipes")
    r.add_argument("--manifest", help="replay a previous run from its manifest.json")
    r.add_argument("--force", action="store_true")
    p = sub.add_parser("report", help="aggregate run directories into table.csv and series.csv")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="directory for the CSV files (printed to stdout when omitted)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            for d in cmd_generate(load_spec(args.spec), args.force):
                print(d)
        elif args.command == "run":
            if args.manifest:
                print(replay_manifest(args.manifest, args.force))
            elif args.spec:
                for d in cmd_run(load_spec(args.spec), args.grid, args.force):
                    print(d)
            else:
                raise ConfigError("run needs a spec file or --manifest")
        else:
            out = cmd_report(args.runs, args.out)
            if args.out is None:
                print(out["table.csv"], end="")
                print(out["series.csv"], end="")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
