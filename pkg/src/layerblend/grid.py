"""Experiment configuration, the results store, and the grid runner.

A grid executes ``fine_tune`` for every (combination spec, seed) pair of
its config. Results land in a directory of one-line JSON files guarded by
a manifest carrying a hash of the config, so re-invocations skip finished
runs and refuse to mix results from different configs. Failed runs are
recorded in the manifest without aborting the rest of the grid.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path
from typing import Iterable

from .combiner import CLS_ONLY, CombinationSpec
from .data import DatasetSplits, SyntheticTaskSpec, gen_synthetic, load_dataset
from .encoder import Checkpoint, EncoderConfig, load_checkpoint, prune_model
from .errors import ConfigError, ContractError, InputError
from .trainer import RunResult, TrainHyper, fine_tune

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = 1

_MODEL_KEYS = {"num_layers", "hidden_size", "max_seq", "num_heads", "ffn_size", "vocab_size"}
_TRAIN_KEYS = {"batch_size", "learning_rate", "epochs", "dropout", "seeds", "eval_batch_size"}
_DATA_KEYS = {"path", "synthetic"}
_SYNTH_KEYS = {"task", "sizes", "seed", "max_chars"}
_GRID_KEYS = {"specs"}


def default_grid(num_layers: int) -> list[CombinationSpec]:
    """The full strategy grid for a model of the given depth."""
    specs = [CombinationSpec("i")]
    specs += [CombinationSpec("ii", layer=l) for l in range(1, num_layers)]
    for strategy in ("v", "ix"):
        for scope in ("all", "code"):
            specs += [
                CombinationSpec(strategy, layer=l, scope=scope)
                for l in range(1, num_layers + 1)
            ]
    specs += [CombinationSpec("iii"), CombinationSpec("iv")]
    for strategy in ("vi", "vii", "viii", "x", "xi"):
        for scope in ("all", "code"):
            specs.append(CombinationSpec(strategy, scope=scope))
    specs += [CombinationSpec("xii", layer=l) for l in range(1, num_layers)]
    return specs


@dataclass
class ExperimentConfig:
    """Everything one grid needs: model, training, data, and the spec list."""

    model: EncoderConfig
    train: TrainHyper
    specs: list[CombinationSpec]
    data_path: str | None = None
    synthetic: SyntheticTaskSpec | None = None

    def __post_init__(self):
        if (self.data_path is None) == (self.synthetic is None):
            raise ConfigError("config needs exactly one of data.path / data.synthetic")
        if not any(s.strategy == "i" for s in self.specs):
            raise ConfigError("the baseline spec (i) must be part of every grid")
        seen = set()
        for spec in self.specs:
            try:
                spec.validate_for_grid(self.model.num_layers)
            except ContractError as exc:
                raise ConfigError(str(exc)) from exc
            if str(spec) in seen:
                raise ConfigError(f"duplicate spec {spec}")
            seen.add(str(spec))
        if not self.train.seeds:
            raise ConfigError("need at least one seed")

    def to_dict(self) -> dict:
        data: dict = (
            {"path": self.data_path}
            if self.data_path is not None
            else {"synthetic": {
                "task": self.synthetic.task,
                "sizes": list(self.synthetic.sizes),
                "seed": self.synthetic.seed,
                "max_chars": self.synthetic.max_chars,
            }}
        )
        model = self.model.to_dict()
        model.pop("dropout")  # the single dropout knob lives in [train]
        return {
            "model": model,
            "train": {**self.train.to_dict(), "seeds": list(self.train.seeds)},
            "data": data,
            "grid": {"specs": [str(s) for s in self.specs]},
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def load_data(self) -> DatasetSplits:
        if self.data_path is not None:
            return load_dataset(self.data_path, self.model.max_seq)
        return gen_synthetic(self.synthetic, self.model.max_seq)


def _section(raw: dict, name: str, allowed: set[str], required: Iterable[str]) -> dict:
    if name not in raw:
        raise ConfigError(f"config lacks the [{name}] section")
    section = raw[name]
    if not isinstance(section, dict):
        raise ConfigError(f"section [{name}] must be an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section [{name}]")
    for key in required:
        if key not in section:
            raise ConfigError(f"section [{name}] lacks required key {key!r}")
    return section


def config_from_dict(raw: dict, where: str = "config") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be an object")
    unknown = sorted(set(raw) - {"model", "train", "data", "grid"})
    if unknown:
        raise ConfigError(f"{where}: unknown section [{unknown[0]}]")

    model_raw = _section(raw, "model", _MODEL_KEYS,
                         ["num_layers", "hidden_size", "max_seq", "num_heads", "ffn_size"])
    train_raw = _section(raw, "train", _TRAIN_KEYS,
                         ["batch_size", "learning_rate", "epochs", "seeds"])
    data_raw = _section(raw, "data", _DATA_KEYS, [])
    grid_raw = _section(raw, "grid", _GRID_KEYS, ["specs"])

    try:
        dropout = float(train_raw.get("dropout", 0.1))
        model = EncoderConfig(**model_raw, dropout=dropout)
        train = TrainHyper(
            batch_size=int(train_raw["batch_size"]),
            learning_rate=float(train_raw["learning_rate"]),
            epochs=int(train_raw["epochs"]),
            dropout=dropout,
            seeds=tuple(int(s) for s in train_raw["seeds"]),
            eval_batch_size=int(train_raw.get("eval_batch_size", 256)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc

    data_path = None
    synthetic = None
    if "path" in data_raw and "synthetic" in data_raw:
        raise ConfigError(f"{where}: section [data] must not mix path and synthetic")
    if "path" in data_raw:
        data_path = str(data_raw["path"])
    elif "synthetic" in data_raw:
        synth_raw = data_raw["synthetic"]
        if not isinstance(synth_raw, dict):
            raise ConfigError(f"{where}: data.synthetic must be an object")
        unknown = sorted(set(synth_raw) - _SYNTH_KEYS)
        if unknown:
            raise ConfigError(f"{where}: unknown key {unknown[0]!r} in data.synthetic")
        try:
            synthetic = SyntheticTaskSpec(
                task=synth_raw["task"],
                sizes=tuple(int(x) for x in synth_raw["sizes"]),
                seed=int(synth_raw.get("seed", 0)),
                max_chars=int(synth_raw.get("max_chars", 48)),
            )
        except (KeyError, TypeError, ValueError, InputError) as exc:
            raise ConfigError(f"{where}: bad data.synthetic ({exc})") from exc
    else:
        raise ConfigError(f"{where}: section [data] needs path or synthetic")

    specs_raw = grid_raw["specs"]
    if specs_raw == "default":
        specs = default_grid(model.num_layers)
    elif isinstance(specs_raw, list):
        specs = [CombinationSpec.parse(str(s)) for s in specs_raw]
    else:
        raise ConfigError(f"{where}: grid.specs must be 'default' or a list")

    return ExperimentConfig(
        model=model, train=train, specs=specs,
        data_path=data_path, synthetic=synthetic,
    )


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return config_from_dict(raw, where=str(path))


# ---------------------------------------------------------------------------
# results store


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def result_filename(spec: CombinationSpec | str, seed: int) -> str:
    return f"{spec}__seed{seed}.json"


class ResultsStore:
    """A directory of per-(spec, seed) run results plus a config manifest."""

    def __init__(self, directory: str | Path, manifest: dict):
        self.directory = Path(directory)
        self.manifest = manifest

    @classmethod
    def create_or_resume(cls, directory: str | Path, config: ExperimentConfig) -> "ResultsStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest_path = directory / MANIFEST_NAME
        config_hash = config.config_hash()
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            if manifest.get("config_hash") != config_hash:
                raise ConfigError(
                    f"{directory} holds results for a different config "
                    f"(hash {manifest.get('config_hash')!r}); refusing to mix"
                )
            manifest["failures"] = {}
        else:
            manifest = {
                "format": MANIFEST_FORMAT,
                "config_hash": config_hash,
                "config": config.to_dict(),
                "failures": {},
            }
        store = cls(directory, manifest)
        store._write_manifest()
        return store

    @classmethod
    def open_existing(cls, directory: str | Path) -> "ResultsStore":
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.is_file():
            raise ConfigError(f"{directory} is not a results store (no manifest)")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        return cls(directory, manifest)

    def config(self) -> ExperimentConfig:
        return config_from_dict(self.manifest["config"], where=str(self.directory))

    def _write_manifest(self) -> None:
        _atomic_write(
            self.directory / MANIFEST_NAME,
            json.dumps(self.manifest, sort_keys=True, indent=1) + "\n",
        )

    def path_for(self, spec: CombinationSpec | str, seed: int) -> Path:
        return self.directory / result_filename(spec, seed)

    def try_load(self, spec: CombinationSpec | str, seed: int) -> RunResult | None:
        path = self.path_for(spec, seed)
        if not path.is_file():
            return None
        try:
            result = RunResult.from_json(path.read_text(encoding="utf-8"))
        except Exception:
            return None
        if str(result.spec) != str(spec) or result.seed != seed:
            return None
        return result

    def save(self, result: RunResult) -> None:
        _atomic_write(self.path_for(result.spec, result.seed), result.to_json() + "\n")

    def record_failure(self, spec: CombinationSpec | str, seed: int, message: str) -> None:
        self.manifest["failures"][result_filename(spec, seed)] = message
        self._write_manifest()

    @property
    def failures(self) -> dict[str, str]:
        return dict(self.manifest.get("failures", {}))


# ---------------------------------------------------------------------------
# the runner


_WORKER_DATA: dict[str, DatasetSplits] = {}


def _run_one(config_dict: dict, ckpt_path: str, spec_text: str, seed: int,
             out_dir: str) -> tuple[str, int, str | None]:
    """Execute one (spec, seed) fine-tune and write its result file."""
    try:
        config = config_from_dict(config_dict)
        key = json.dumps(config_dict.get("data"), sort_keys=True) + f"|{config.model.max_seq}"
        if key not in _WORKER_DATA:
            _WORKER_DATA[key] = config.load_data()
        data = _WORKER_DATA[key]
        ckpt = load_checkpoint(ckpt_path)
        spec = CombinationSpec.parse(spec_text)
        if spec.strategy == "xii":
            ckpt = prune_model(ckpt, spec.layer)
        result, _ = fine_tune(ckpt, spec, data, config.train, seed)
        store = ResultsStore(Path(out_dir), manifest={})
        store.save(result)
        return spec_text, seed, None
    except Exception as exc:  # reported per run, the grid keeps going
        return spec_text, seed, f"{type(exc).__name__}: {exc}"


def check_checkpoint_matches(ckpt: Checkpoint, config: ExperimentConfig) -> None:
    import dataclasses as _dc

    have = _dc.replace(ckpt.config, dropout=config.model.dropout)
    if have != config.model:
        raise ConfigError(
            f"checkpoint config {ckpt.config} does not match the experiment "
            f"model section {config.model}"
        )


def run_grid(config: ExperimentConfig, ckpt_path: str | Path,
             out_dir: str | Path, jobs: int = 1) -> ResultsStore:
    """Run every missing (spec, seed) of the grid; resumable and atomic.

    With ``jobs > 1`` runs execute in separate worker processes (each run is
    independent); ``jobs=1`` keeps everything in-process, which is what you
    want for trustworthy wall-clock numbers.
    """
    ckpt_path = str(ckpt_path)
    check_checkpoint_matches(load_checkpoint(ckpt_path), config)
    store = ResultsStore.create_or_resume(out_dir, config)
    pending = [
        (str(spec), seed)
        for spec in config.specs
        for seed in config.train.seeds
        if store.try_load(spec, seed) is None
    ]
    config_dict = config.to_dict()
    if jobs <= 1:
        outcomes = [
            _run_one(config_dict, ckpt_path, spec_text, seed, str(store.directory))
            for spec_text, seed in pending
        ]
    else:
        # spawned workers re-import numpy under the env set here, keeping
        # BLAS single-threaded so the pool does not oversubscribe the host
        previous = os.environ.get("OMP_NUM_THREADS")
        os.environ["OMP_NUM_THREADS"] = "1"
        try:
            with ProcessPoolExecutor(
                max_workers=jobs, mp_context=get_context("spawn")
            ) as pool:
                outcomes = list(pool.map(
                    _run_one,
                    *zip(*[
                        (config_dict, ckpt_path, spec_text, seed, str(store.directory))
                        for spec_text, seed in pending
                    ]),
                )) if pending else []
        finally:
            if previous is None:
                os.environ.pop("OMP_NUM_THREADS", None)
            else:
                os.environ["OMP_NUM_THREADS"] = previous
    for spec_text, seed, error in outcomes:
        if error is not None:
            store.record_failure(spec_text, seed, error)
    return store


def covered_by_reports(config: ExperimentConfig) -> tuple[set[str], set[str]]:
    """Spec names the heatmap block covers vs the pruning table block."""
    heatmap = {str(s) for s in config.specs if s.strategy not in ("xii",)}
    pruning = {str(s) for s in config.specs if s.strategy in ("xii", "i")}
    return heatmap, pruning


__all__ = [
    "CLS_ONLY",
    "ExperimentConfig",
    "ResultsStore",
    "check_checkpoint_matches",
    "config_from_dict",
    "covered_by_reports",
    "default_grid",
    "parse_config",
    "result_filename",
    "run_grid",
]
