"""Config loading, end-to-end runs, sweeps and report aggregation.

A run reads one TOML file whose dotted keys mirror the module configs
(``model.*``, ``router.*``, ``compressor.*``, ``scheduler.*``, ``engine.*``,
``cost.*``, ``topology.*``, ``trace.*``). Unknown keys are rejected. Output is
an event log (one JSON line per decode step) plus a report (one JSON line)
and a human-readable table. All times are simulated, so two runs of the same
config produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import costmodel
from .compressor import CompressorConfig
from .core import InvalidConfig, ModelConfig, MoEKVError, compressed_width
from .pipeline import Engine, EngineConfig, FullCacheOracle, fidelity_term
from .router import RouterConfig
from .scheduler import SchedulerConfig
from .topology import Topology
from .trace import TraceSpec, generate_trace, read_trace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SEED_ENV = "PIKV_SEED"
EVENTS_FILE = "events.jsonl"
REPORT_FILE = "report.jsonl"
SNAPSHOT_FILE = "snapshot.jsonl"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass(frozen=True)
class TopologyConfig:
    link_latency: float = 1e-6
    link_bandwidth: float = 1e9
    local_latency: float = 1e-7


@dataclass(frozen=True)
class RunOptions:
    """Engine-level switches that are not part of any single module."""

    attend: str = "compressed"
    home: str = "round_robin"
    additive: bool = False
    n_tok: int = 0
    n_exp: int = 0
    capacity: int = 0  # 0 -> model.L, so rings only wrap past the token budget
    fidelity: bool = True
    seed: int = 0


@dataclass(frozen=True)
class CostOptions:
    beta: float = 1.6e12
    gamma_core: float = 1.0e12
    eta_decode: float = 1.0
    peak_compute: float = 3.12e14
    peak_mem_bw: float = 1.6e12
    batch: int = 1
    util_threshold: float = 0.0


@dataclass(frozen=True)
class TraceOptions:
    T: int = 0  # 0 -> model.L
    vocab: int = 256
    skew: float = 1.1
    seed: int = 0
    n_layers: int = 4
    path: str = ""  # read this trace file instead of generating one


# section name -> (dataclass, keys filled in by the loader rather than the user)
_SECTIONS = {
    "model": (ModelConfig, ()),
    "router": (RouterConfig, ("k",)),
    "compressor": (CompressorConfig, ()),
    "scheduler": (SchedulerConfig, ()),
    "engine": (RunOptions, ()),
    "cost": (CostOptions, ()),
    "topology": (TopologyConfig, ()),
    "trace": (TraceOptions, ()),
}
# scheduler keys the user may leave out or switch off
_EXTRA_KEYS = {"scheduler.enabled"}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    router: RouterConfig
    compressor: CompressorConfig
    scheduler: SchedulerConfig | None
    engine: RunOptions
    cost: CostOptions
    topology: TopologyConfig
    trace: TraceOptions

    def engine_config(self) -> EngineConfig:
        e = self.engine
        return EngineConfig(model=self.model, router=self.router, compressor=self.compressor,
                            scheduler=self.scheduler, n_tok=e.n_tok, n_exp=e.n_exp,
                            additive=e.additive, n_layers=self.trace.n_layers, attend=e.attend,
                            home=e.home, capacity=e.capacity or self.model.L, seed=e.seed)

    def trace_spec(self) -> TraceSpec:
        t = self.trace
        return TraceSpec(T=t.T or self.model.L, d=self.model.d, vocab=t.vocab, skew=t.skew,
                         seed=t.seed, n_layers=t.n_layers)

    def hardware(self) -> costmodel.HardwareProfile:
        c = self.cost
        return costmodel.HardwareProfile(c.beta, c.gamma_core, c.eta_decode, c.peak_compute,
                                         c.peak_mem_bw)

    def build_topology(self) -> Topology:
        t = self.topology
        return Topology.uniform(self.model.G, t.link_latency, t.link_bandwidth, t.local_latency)


# ---------------------------------------------------------------------------
# config parsing


def flatten(tree: dict, prefix: str = "") -> dict:
    """Nested TOML tables -> {"section.key": value}."""
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def allowed_keys() -> set[str]:
    keys = set(_EXTRA_KEYS)
    for name, (cls, derived) in _SECTIONS.items():
        keys.update(f"{name}.{f.name}" for f in dataclasses.fields(cls) if f.name not in derived)
    return keys


def parse_value(text: str):
    """A TOML scalar if it parses as one, otherwise the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _coerce(cls, name, value):
    f = {f.name: f for f in dataclasses.fields(cls)}[name]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(value, str) or isinstance(value, bool):
            raise InvalidConfig(f"{name} expects a number, got {value!r}")
    return value


def build_config(flat: dict, env: dict | None = None) -> RunConfig:
    """Validate a flat {dotted key: value} mapping and assemble the run config."""
    env = os.environ if env is None else env
    unknown = sorted(set(flat) - allowed_keys())
    if unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
    flat = dict(flat)
    if SEED_ENV in env:
        try:
            flat["trace.seed"] = int(env[SEED_ENV])
        except ValueError:
            raise InvalidConfig(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    sections = {name: {} for name in _SECTIONS}
    for key, value in flat.items():
        sec, name = key.split(".", 1)
        if key in _EXTRA_KEYS:
            continue
        sections[sec][name] = _coerce(_SECTIONS[sec][0], name, value)
    try:
        model = ModelConfig(**sections["model"])
        router = RouterConfig(k=model.k, **sections["router"])
        comp = dict(sections["compressor"])
        comp.setdefault("rank", compressed_width(model.d, model.rho))
        compressor = CompressorConfig(**comp)
        sched = dict(sections["scheduler"])
        scheduler = None
        if flat.get("scheduler.enabled", bool(sched)):
            sched.setdefault("budget_pages", model.K)
            if sched["budget_pages"] == 0:  # TOML has no null; 0 means unbounded
                sched["budget_pages"] = None
            sched.setdefault("page_size", model.S)
            scheduler = SchedulerConfig(**sched)
        cfg = RunConfig(model, router, compressor, scheduler, RunOptions(**sections["engine"]),
                        CostOptions(**sections["cost"]), TopologyConfig(**sections["topology"]),
                        TraceOptions(**sections["trace"]))
        cfg.engine_config()
        cfg.hardware()
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None
    return cfg


def load_config(path, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            tree = tomllib.load(fh)
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid TOML: {exc}") from None
    flat = flatten(tree)
    flat.update(overrides or {})
    return build_config(flat, env)


# ---------------------------------------------------------------------------
# running


@dataclass
class MetricsReport:
    steps: int
    hit_rate: float
    served: int
    requested: int
    misses: int
    evictions: int
    latency_mean: float
    latency_p50: float
    latency_p95: float
    latency_p99: float
    latency_total: float
    fetch_bytes: int
    local_fetch_fraction: float
    io_elements: int
    io_sparse_model: float
    peak_memory_bytes: int
    mem_total_bound_bytes: float
    fidelity_total: float | None
    expert_load: list = field(default_factory=list)
    throughput_scaling: float = 0.0
    util_eta: float = 0.0
    util_pass: bool = True
    objective_latency: float = 0.0
    objective_memory: float = 0.0
    objective_hit: float = 0.0

    def as_record(self) -> dict:
        return dataclasses.asdict(self)


def _percentile(x, q):
    return float(np.percentile(x, q)) if len(x) else 0.0


def summarize(records, cfg: RunConfig | None = None, peak_memory: int = 0) -> MetricsReport:
    """Aggregate per-step event records into a report.

    Without ``cfg`` (the ``report`` subcommand) the model-derived fields stay zero.
    """
    lat = np.array([r["latency"] for r in records], dtype=np.float64)
    served = sum(r["served"] for r in records)
    requested = sum(r["requested"] for r in records)
    local = sum(r["local_fetches"] for r in records)
    remote = sum(r["remote_fetches"] for r in records)
    fid = [r["fidelity"] for r in records if r.get("fidelity") is not None]
    E = cfg.model.E if cfg else 1 + max((e for r in records for e in r["experts"]), default=-1)
    load = [0] * E
    for r in records:
        for e in r["experts"]:
            load[e] += 1
    rep = MetricsReport(
        steps=len(records),
        hit_rate=served / requested if requested else 1.0,
        served=served,
        requested=requested,
        misses=sum(len(r["misses"]) for r in records),
        evictions=sum(len(r["evictions"]) for r in records),
        latency_mean=float(lat.mean()) if len(lat) else 0.0,
        latency_p50=_percentile(lat, 50),
        latency_p95=_percentile(lat, 95),
        latency_p99=_percentile(lat, 99),
        latency_total=float(lat.sum()),
        fetch_bytes=sum(r["fetch_bytes"] for r in records),
        local_fetch_fraction=local / (local + remote) if local + remote else 0.0,
        io_elements=sum(r["io_elements"] for r in records),
        io_sparse_model=0.0,
        peak_memory_bytes=peak_memory,
        mem_total_bound_bytes=0.0,
        fidelity_total=float(sum(fid)) if fid else None,
        expert_load=load,
    )
    rep.objective_latency = rep.latency_mean
    rep.objective_memory = float(rep.peak_memory_bytes)
    rep.objective_hit = rep.hit_rate
    if cfg is not None:
        _add_model_terms(rep, cfg)
    return rep


def effective_model(cfg: RunConfig, stored_width: int) -> ModelConfig:
    """The model config with rho set to d / (actual stored width)."""
    return dataclasses.replace(cfg.model, rho=cfg.model.d / stored_width)


def _add_model_terms(rep: MetricsReport, cfg: RunConfig) -> None:
    m = cfg.model
    roof = costmodel.io_and_roofline(m, cfg.cost.batch)
    rep.throughput_scaling = roof.throughput_scaling
    active = sum(1 for c in rep.expert_load if c > 0)
    rep.util_pass, rep.util_eta = costmodel.utilization_check(m, active, cfg.cost.util_threshold)
    # mean attended prefix per expert under balanced routing, for B = steps queries
    T = rep.steps
    L_attended = m.k * (T - 1) / (2 * m.E) if T else 0.0
    rep.io_sparse_model = costmodel.io_terms(L_attended, m.head_width, m.d, m.E, m.k, T)[1]


@dataclass
class RunResult:
    report: MetricsReport
    records: list
    outputs: list  # per-step attention outputs, full width
    snapshot: list = field(default_factory=list)  # live entries at stream end


def execute(cfg: RunConfig, trace=None) -> RunResult:
    """Drive one stream through the engine (and the oracle, for fidelity)."""
    ecfg = cfg.engine_config()
    if trace is None:
        trace = read_trace(cfg.trace.path) if cfg.trace.path else generate_trace(cfg.trace_spec())
    engine = Engine(ecfg, topology=cfg.build_topology())
    oracle = FullCacheOracle(ecfg) if cfg.engine.fidelity else None
    records, outputs = [], []
    peak = 0
    for ev in trace:
        if len(ev.embedding) != cfg.model.d:
            raise InvalidConfig(f"trace width {len(ev.embedding)} != model.d {cfg.model.d}")
        y, rep = engine.decode_step(ev.embedding, ev.layer_weights)
        if oracle is not None:
            _, otrace = oracle.decode_step(ev.embedding)
            rep.fidelity = fidelity_term(otrace, rep.trace)
        peak = max(peak, int(engine.store.device_bytes().max()))
        records.append(rep.as_record())
        outputs.append(engine.full_width(y))
    tail = engine.finish()
    if tail is not None:
        records.append(tail.as_record())
        peak = max(peak, int(engine.store.device_bytes().max()))
    report = summarize(records, cfg, peak)
    m_eff = effective_model(cfg, engine.codec.width)
    report.mem_total_bound_bytes = costmodel.mem_total(m_eff, units="bytes")[2]
    return RunResult(report, records, outputs, engine.store.snapshot(engine.t))


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False)


def write_outputs(result: RunResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    events = out / EVENTS_FILE
    report = out / REPORT_FILE
    with open(events, "w") as fh:
        for rec in result.records:
            fh.write(dumps(rec) + "\n")
    with open(report, "w") as fh:
        fh.write(dumps(result.report.as_record()) + "\n")
    with open(out / SNAPSHOT_FILE, "w") as fh:
        for rec in result.snapshot:
            fh.write(dumps(rec) + "\n")
    return events, report


def read_events(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_table(record: dict) -> str:
    rows = []
    for k, v in record.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, list) and len(v) > 16:
            v = f"[{len(v)} values]"
        rows.append((k, str(v)))
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


# ---------------------------------------------------------------------------
# sweeps and cost tables


def parse_vary(specs) -> list[tuple[str, list]]:
    out = []
    for spec in specs:
        if "=" not in spec:
            raise InvalidConfig(f"--vary expects key=a,b,c, got {spec!r}")
        key, values = spec.split("=", 1)
        out.append((key.strip(), [parse_value(v.strip()) for v in values.split(",") if v.strip()]))
    return out


def sweep_points(vary) -> list[dict]:
    keys = [k for k, _ in vary]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in vary))]


def cost_record(cfg: RunConfig) -> dict:
    rec = costmodel.cost_report(cfg.model, cfg.hardware(), cfg.cost.batch).as_record()
    shard = costmodel.optimal_shard_size(cfg.model.L, cfg.model.K, cfg.model.G, cfg.model.d, cfg.model.rho)
    rec.update(s_star=shard.s_star, s_floor=shard.floor, s_ceil=shard.ceil, s_best=shard.best)
    return rec


# ---------------------------------------------------------------------------
# entry points used by the CLI; each returns an exit code


def _fail(code: int, exc: Exception, err) -> int:
    kind = "config error" if code == EXIT_CONFIG else "runtime error"
    print(f"moekv: {kind}: {exc}", file=err)
    return code


def cmd_run(config, out_dir, out=sys.stdout, err=sys.stderr, overrides=None) -> int:
    try:
        cfg = load_config(config, overrides)
    except MoEKVError as exc:
        return _fail(EXIT_CONFIG, exc, err)
    try:
        result = execute(cfg)
        write_outputs(result, out_dir)
    except (MoEKVError, OSError, FloatingPointError) as exc:
        return _fail(EXIT_RUNTIME, exc, err)
    print(format_table(result.report.as_record()), file=out)
    return EXIT_OK


def cmd_sweep(config, vary, out_dir, out=sys.stdout, err=sys.stderr) -> int:
    try:
        points = sweep_points(parse_vary(vary))
        cfgs = [load_config(config, p) for p in points]
    except MoEKVError as exc:
        return _fail(EXIT_CONFIG, exc, err)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    try:
        for i, (point, cfg) in enumerate(zip(points, cfgs)):
            result = execute(cfg)
            write_outputs(result, out_dir / f"point{i:03d}")
            lines.append(dumps({"point": point, **result.report.as_record()}))
    except (MoEKVError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc, err)
    with open(out_dir / "sweep.jsonl", "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
    for line in lines:
        print(line, file=out)
    return EXIT_OK


def cmd_cost(config, vary=(), out=sys.stdout, err=sys.stderr) -> int:
    try:
        if vary:
            points = sweep_points(parse_vary(vary))
            for p in points:
                print(dumps({"point": p, **cost_record(load_config(config, p))}), file=out)
        else:
            print(format_table(cost_record(load_config(config))), file=out)
    except MoEKVError as exc:
        return _fail(EXIT_CONFIG, exc, err)
    return EXIT_OK


def cmd_trace(spec_path, output, err=sys.stderr) -> int:
    from .trace import write_trace

    try:
        cfg = load_config(spec_path)
        spec = cfg.trace_spec()
        write_trace(output, generate_trace(spec), spec.d, spec.n_layers)
    except MoEKVError as exc:
        return _fail(EXIT_CONFIG, exc, err)
    except OSError as exc:
        return _fail(EXIT_RUNTIME, exc, err)
    return EXIT_OK


def cmd_report(log, out=sys.stdout, err=sys.stderr, as_json: bool = False) -> int:
    try:
        rec = summarize(read_events(log)).as_record()
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        return _fail(EXIT_RUNTIME, exc, err)
    print(dumps(rec) if as_json else format_table(rec), file=out)
    return EXIT_OK
