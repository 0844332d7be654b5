"""Experiment pipeline: config files, pretraining, one adaptation run, report files.

A config is an INI file with the sections ``experiment``, ``corpus``, ``arch``,
``fl`` and ``pretrain``. Every key maps to a dataclass field; unknown sections
or keys are errors. ``seed`` and ``out_dir`` have no defaults and usually come
from the command line.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import os
import tempfile
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .data import CorpusSpec, gen_corpus, iid_merge, source_spec
from .metrics import eval_model, personalization_matrix, speaker_probe
from .model import ArchSpec, ConfigError, SeqModel, build_model, extractor_fwd, pad_batch
from .protocol import FLConfig, cost_report, encode_features, model_bytes, run_algorithm
from .training import TrainSettings, pretrain

FORMAT_VERSION = 1
CHECKPOINT_NAME = "pretrained.fsim"
SECTIONS = ("experiment", "corpus", "arch", "fl", "pretrain")
# seeds are set once, in [experiment]
_DERIVED = {"corpus": {"seed"}, "fl": {"seed"}}


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage it came from."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@dataclass(frozen=True)
class PretrainBudget:
    epochs: int = 50
    lr: float = 3e-3
    optimizer: str = "adam"
    batch_size: int = 16
    n_avg: int = 3


@dataclass
class ExperimentConfig:
    seed: int | None = None
    out_dir: str | None = None
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    arch: ArchSpec = field(default_factory=ArchSpec)
    fl: FLConfig = field(default_factory=FLConfig)
    pretrain: PretrainBudget = field(default_factory=PretrainBudget)

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ConfigError("seed is required")
        if self.out_dir is None:
            raise ConfigError("out_dir is required")
        self.corpus.validate()
        self.arch.validate()
        self.fl.validate()
        if self.arch.input_dim != self.corpus.dim or self.arch.vocab != self.corpus.vocab:
            raise ConfigError("arch input_dim/vocab must match the corpus dim/vocab")
        if self.arch.speakers != self.corpus.total_speakers:
            raise ConfigError(f"arch speakers={self.arch.speakers} but the corpus has "
                              f"{self.corpus.total_speakers}")
        if self.fl.clients != self.corpus.clients:
            raise ConfigError("fl clients must equal corpus clients")
        if self.pretrain.epochs < 0 or self.pretrain.n_avg < 1:
            raise ConfigError("bad pretrain budget")
        return self

    @property
    def target_spec(self) -> CorpusSpec:
        return replace(self.corpus, seed=self.seed)

    @property
    def fl_config(self) -> FLConfig:
        return replace(self.fl, seed=self.seed)


def _coerce(raw: str, default, key: str):
    kind = type(default)
    try:
        if kind is bool:
            return {"true": True, "1": True, "yes": True,
                    "false": False, "0": False, "no": False}[raw.strip().lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw.strip()


def _section(cls, items: dict, name: str):
    base = cls()
    allowed = {f.name for f in fields(cls)} - _DERIVED.get(name, set())
    values = {}
    for key, raw in items.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        values[key] = _coerce(raw, getattr(base, key), f"{name}.{key}")
    return cls(**values)


def parse_config(text: str, *, seed=None, out_dir=None) -> ExperimentConfig:
    """Parse INI text; ``seed``/``out_dir`` arguments override the file."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    get = lambda s: dict(cp[s]) if cp.has_section(s) else {}
    exp = get("experiment")
    unknown = set(exp) - {"seed", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in [experiment]")
    cfg = ExperimentConfig(
        seed=int(exp["seed"]) if "seed" in exp else None,
        out_dir=exp.get("out_dir"),
        corpus=_section(CorpusSpec, get("corpus"), "corpus"),
        arch=_section(ArchSpec, get("arch"), "arch"),
        fl=_section(FLConfig, get("fl"), "fl"),
        pretrain=_section(PretrainBudget, get("pretrain"), "pretrain"))
    if seed is not None:
        cfg.seed = int(seed)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, **overrides)


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("fedctc.presets").iterdir()
                  if p.name.endswith(".ini"))


def load_preset(name: str, **overrides) -> ExperimentConfig:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(preset_names())}")
    text = resources.files("fedctc.presets").joinpath(f"{name}.ini").read_text()
    return parse_config(text, **overrides)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Full INI echo: every field, so the text alone reproduces the run."""
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)

    out = ["[experiment]", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}", ""]
    for name in SECTIONS[1:]:
        obj = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(obj):
            if f.name not in _DERIVED.get(name, set()):
                out.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _log(log, stage, msg):
    if log:
        log(f"[{stage}] {msg}")


def corpora(cfg: ExperimentConfig):
    """(target, source) corpora generated from the config."""
    tgt = gen_corpus(cfg.target_spec)
    return tgt, gen_corpus(source_spec(cfg.target_spec))


def pretrain_baseline(cfg: ExperimentConfig, source=None, log=None, save: bool = True):
    """Supervised CTC training on the accent-free source corpus.

    Returns ``(model, info)`` with per-epoch losses and source/target test WER.
    """
    cfg.validate()
    try:
        if source is None:
            _, source = corpora(cfg)
        pb = cfg.pretrain
        settings = TrainSettings(lr=pb.lr, optimizer=pb.optimizer, batch_size=pb.batch_size)
        model = build_model(cfg.arch, cfg.seed)
        train = iid_merge([c.train for c in source.clients])
        val = iid_merge([c.val for c in source.clients])
        model, losses = pretrain(model, train, val, settings, pb.epochs, [cfg.seed, 11],
                                 n_avg=pb.n_avg, log=lambda m: _log(log, "pretrain", m))
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        raise StageError("pretrain", str(exc)) from exc
    test = iid_merge([c.test for c in source.clients])
    info = {"losses": losses, "source_test_wer": eval_model(model, test).wer}
    if save:
        path = Path(cfg.out_dir) / CHECKPOINT_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model.params, path)
        _log(log, "pretrain", f"saved {path}")
    return model, info


def load_pretrained(cfg: ExperimentConfig) -> SeqModel:
    path = Path(cfg.out_dir) / CHECKPOINT_NAME
    if not path.exists():
        raise StageError("run", f"no pretrained checkpoint at {path}; run 'pretrain' first")
    try:
        store = load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise StageError("run", f"cannot load {path}: {exc}") from exc
    ref = build_model(cfg.arch, 0).params
    if store.names() != ref.names() or any(store[n].shape != ref[n].shape for n in ref.names()):
        raise StageError("run", f"checkpoint {path} does not match the configured architecture")
    return SeqModel(cfg.arch, store)


@dataclass
class RunReport:
    format_version: int
    algorithm: str
    variant: str
    per_client_wer: list
    average_wer: float
    personalization_matrix: list
    cost: dict
    probe_accuracy: list
    mean_probe_accuracy: float
    skips: dict
    stage_hashes: dict
    config: str
    wall_clock: float = 0.0
    # run artifacts, not part of the serialized report
    channel_csv: str = field(default="", repr=False, compare=False)
    shipments: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self, wall_clock: bool = True) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)
             if f.name not in ("channel_csv", "shipments")}
        if not wall_clock:
            d.pop("wall_clock")
        return d

    def to_json(self, wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(wall_clock), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported report version {d.get('format_version')!r}")
        return cls(**d)


def probe_accuracies(models, corpus, seed: int) -> list[float]:
    """Speaker-probe accuracy on each client's training features."""
    out = []
    for k, m in enumerate(models):
        utts = corpus.clients[k].train
        pooled = []
        for i in range(0, len(utts), 128):
            X, lens = pad_batch([u.features for u in utts[i:i + 128]])
            F, _ = extractor_fwd(m, X)
            flens = m.arch.out_frames(lens)
            pooled.extend(F[b, :flens[b]].mean(axis=0) for b in range(len(lens)))
        out.append(speaker_probe(np.stack(pooled), [u.speaker for u in utts], seed=seed))
    return out


def run_experiment(cfg: ExperimentConfig, base: SeqModel | None = None, corpus=None,
                   log=None) -> RunReport:
    """Adapt the pretrained model with the configured algorithm and evaluate it."""
    start = time.perf_counter()
    try:
        cfg.validate()
    except ConfigError as exc:
        raise StageError("config", str(exc)) from exc
    if base is None:
        base = load_pretrained(cfg)
    if corpus is None:
        corpus = gen_corpus(cfg.target_spec)
    fl = cfg.fl_config
    _log(log, "run", f"algorithm={fl.algorithm} variant={fl.variant} seed={cfg.seed}")
    try:
        result = run_algorithm(base, corpus, fl)
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        raise StageError("run", str(exc)) from exc
    _log(log, "evaluate", "scoring test sets")
    tests = [c.test for c in corpus.clients]
    M = personalization_matrix(result.models, tests)
    wers = [float(M[k, k]) for k in range(len(tests))]
    probes = probe_accuracies(result.models, corpus, cfg.seed)
    cost = cost_report(result.channel, result.ledger, fl, model_bytes(base))
    return RunReport(
        format_version=FORMAT_VERSION, algorithm=fl.algorithm, variant=fl.variant,
        per_client_wer=wers, average_wer=float(np.mean(wers)),
        personalization_matrix=M.tolist(), cost=cost.as_dict(),
        probe_accuracy=probes, mean_probe_accuracy=float(np.mean(probes)),
        skips=result.skips, stage_hashes=result.stage_hashes, config=config_to_text(cfg),
        wall_clock=time.perf_counter() - start,
        channel_csv=result.channel.to_csv(), shipments=result.shipments)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def atomic_write(path, data) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    blob = data.encode() if isinstance(data, str) else data
    tmp = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp and os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(f"cannot write {path}: {exc}") from exc


def matrix_csv(M) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + [f"test{j}" for j in range(len(M))])
    for i, row in enumerate(M):
        w.writerow([f"client{i}"] + [repr(float(v)) for v in row])
    return buf.getvalue()


def emit_outputs(report: RunReport, out_dir, dump_features: bool = False) -> list[Path]:
    """Write report.json, matrix.csv, channel.csv and optional FFEA1 feature dumps."""
    out = Path(out_dir)
    files = {"report.json": report.to_json(),
             "matrix.csv": matrix_csv(report.personalization_matrix),
             "channel.csv": report.channel_csv}
    if dump_features:
        for k in sorted(report.shipments):
            files[f"features_client{k}.ffea"] = encode_features(k, report.shipments[k])
    written = []
    for name, data in files.items():
        atomic_write(out / name, data)
        written.append(out / name)
    return written


def summarize(report: RunReport) -> str:
    lines = [f"algorithm      {report.algorithm} ({report.variant})",
             "per-client WER " + " ".join(f"{100 * w:6.2f}" for w in report.per_client_wer),
             f"average WER    {100 * report.average_wer:6.2f}",
             f"speaker probe  {report.mean_probe_accuracy:.3f}"]
    c = report.cost
    if c.get("comm_ratio") is not None:
        lines.append(f"comm bytes     {c['comm_bytes']} ({100 * c['comm_ratio']:.1f}% of FedAvg)")
        lines.append(f"compute        {c['total_compute']:.1f} epochs "
                     f"({100 * c['compute_ratio']:.1f}% of FedAvg)")
    return "\n".join(lines)
