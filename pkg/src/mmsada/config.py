"""Line-oriented experiment files.

A file is a list of ``key = value`` lines.  Keys before any section header
configure the experiment (:class:`~mmsada.trainer.ExperimentConfig`).
``[data]`` holds :class:`~mmsada.synthdata.GeneratorParams` fields plus
``prototype_seed``.  Each ``[domain <id>]`` section declares one
:class:`~mmsada.synthdata.SyntheticDomainSpec`; when none is given the three
default domains D1..D3 are used.  ``#`` starts a comment.

Example::

    method = mm-sada
    source_domain = D1
    target_domain = D2
    seed = 0

    [data]
    prototype_seed = 0

    [domain D1]
    seed = 101
    appearance_strength = 0.3
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synthdata import ConfigError, GeneratorParams, SyntheticDomainSpec, default_domain_specs
from .trainer import ExperimentConfig

REQUIRED_KEYS = ("method", "source_domain", "target_domain")
SUITE_KEYS = ("methods", "pairs", "seeds", "sweep", "sweep_values")
SWEEPS = ("none", "lambda_d", "policy")


class ConfigParseError(ConfigError):
    def __init__(self, source: str, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"{source}:{lineno}: {message}")


@dataclass
class Section:
    kind: str                      # "top", "data" or "domain"
    name: str = ""
    lineno: int = 0
    entries: dict = field(default_factory=dict)   # key -> (value, lineno)


def parse_sections(text: str, source: str = "<config>") -> list[Section]:
    sections = [Section("top")]
    seen_domains = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigParseError(source, lineno, f"unterminated section header {raw.strip()!r}")
            head = line[1:-1].split()
            if head == ["data"]:
                sections.append(Section("data", lineno=lineno))
            elif len(head) == 2 and head[0] == "domain":
                if head[1] in seen_domains:
                    raise ConfigParseError(source, lineno, f"domain {head[1]} declared twice")
                seen_domains.add(head[1])
                sections.append(Section("domain", head[1], lineno))
            else:
                raise ConfigParseError(source, lineno, f"unknown section {line!r}")
            continue
        if "=" not in line:
            raise ConfigParseError(source, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigParseError(source, lineno, "empty key")
        cur = sections[-1]
        if key in cur.entries:
            raise ConfigParseError(source, lineno, f"duplicate key {key!r}")
        cur.entries[key] = (value, lineno)
    return sections


def _coerce(value: str, default, source: str, lineno: int, key: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(","))
        return value
    except ValueError:
        raise ConfigParseError(source, lineno, f"bad value {value!r} for {key!r}") from None


def _fill(cls, entries: dict, source: str, skip=(), extra=None, **fixed):
    """Build a dataclass from parsed entries, coercing by the field defaults."""
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            defaults[f.name] = f.default_factory()
        elif f.type in ("int", "float", "str"):
            # required field: a sample value of its type drives coercion
            defaults[f.name] = {"int": 0, "float": 0.0, "str": ""}[f.type]
    kwargs = dict(fixed)
    for key, (value, lineno) in entries.items():
        if key in skip:
            continue
        if extra is not None and key in extra:
            kwargs[key] = extra[key](value, lineno)
            continue
        if key not in defaults:
            raise ConfigParseError(source, lineno, f"unknown key {key!r}")
        kwargs[key] = _coerce(value, defaults[key], source, lineno, key)
    return kwargs


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    generator: GeneratorParams
    domains: list
    prototype_seed: int = 0


@dataclass
class SuiteSpec:
    methods: list
    pairs: list
    seeds: list
    base: RunConfig
    sweep: str = "none"
    sweep_values: list = field(default_factory=list)

    def __post_init__(self):
        if not self.methods or not self.pairs or not self.seeds:
            raise ConfigError("suite needs non-empty methods, pairs and seeds")
        if self.sweep not in SWEEPS:
            raise ConfigError(f"sweep must be one of {SWEEPS}")
        if self.sweep != "none" and not self.sweep_values:
            raise ConfigError(f"sweep over {self.sweep} needs sweep_values")


def _data_and_domains(sections, source):
    gen_entries, proto_seed = {}, 0
    domains = []
    for sec in sections:
        if sec.kind == "data":
            entries = dict(sec.entries)
            if "prototype_seed" in entries:
                v, ln = entries.pop("prototype_seed")
                proto_seed = _coerce(v, 0, source, ln, "prototype_seed")
            gen_entries.update(entries)
        elif sec.kind == "domain":
            domains.append(sec)
    gen = GeneratorParams(**_fill(GeneratorParams, gen_entries, source))
    if not domains:
        specs = default_domain_specs(class_count=gen.class_count)
    else:
        def prior(value, lineno):
            try:
                return np.array([float(v) for v in value.split(",")])
            except ValueError:
                raise ConfigParseError(source, lineno, f"bad class_prior {value!r}") from None

        specs = []
        for sec in domains:
            if "seed" not in sec.entries:
                raise ConfigParseError(source, sec.lineno, f"domain {sec.name}: missing required key 'seed'")
            kw = _fill(SyntheticDomainSpec, sec.entries, source, extra={"class_prior": prior},
                       domain_id=sec.name)
            kw.setdefault("class_count", gen.class_count)
            specs.append(SyntheticDomainSpec(**kw))
    return gen, specs, proto_seed


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    sections = parse_sections(text, source)
    top = sections[0].entries
    for key in REQUIRED_KEYS:
        if key not in top:
            raise ConfigError(f"{source}: missing required key {key!r}")
    exp = ExperimentConfig(**_fill(ExperimentConfig, top, source))
    exp.validate()
    gen, specs, proto = _data_and_domains(sections, source)
    ids = {s.domain_id for s in specs}
    for key in ("source_domain", "target_domain"):
        if getattr(exp, key) not in ids:
            raise ConfigError(f"{source}: {key} {getattr(exp, key)!r} is not a declared domain")
    return RunConfig(exp, gen, specs, proto)


def parse_suite(text: str, source: str = "<suite>") -> SuiteSpec:
    sections = parse_sections(text, source)
    top = sections[0].entries

    def items(key):
        v = top.get(key, ("", 0))[0]
        return [s.strip() for s in v.split(",") if s.strip()]

    if "methods" not in top:
        raise ConfigError(f"{source}: missing required key 'methods'")
    gen, specs, proto = _data_and_domains(sections, source)
    ids = [s.domain_id for s in specs]
    pairs = []
    for p in items("pairs") or [f"{a}>{b}" for a in ids for b in ids if a != b]:
        if ">" not in p:
            raise ConfigParseError(source, top["pairs"][1], f"pair {p!r} must look like D1>D2")
        a, b = (s.strip() for s in p.split(">", 1))
        if a not in ids or b not in ids or a == b:
            raise ConfigParseError(source, top["pairs"][1], f"bad domain pair {p!r}")
        pairs.append((a, b))
    try:
        seeds = [int(s) for s in items("seeds")] if "seeds" in top else [0, 1, 2]
    except ValueError:
        raise ConfigParseError(source, top["seeds"][1], "seeds must be integers") from None
    sweep = top.get("sweep", ("none", 0))[0]
    values = items("sweep_values")
    if sweep == "lambda_d":
        try:
            values = [float(v) for v in values]
        except ValueError:
            raise ConfigParseError(source, top["sweep_values"][1], "lambda_d values must be numbers") from None
    elif sweep == "policy" and not values:
        values = ["sync", "seg_corr"]
    exp_entries = {k: v for k, v in top.items() if k not in SUITE_KEYS}
    kw = _fill(ExperimentConfig, exp_entries, source)
    base_exp = ExperimentConfig(**{"method": items("methods")[0] if items("methods") else "mm-sada", **kw})
    base = RunConfig(base_exp, gen, specs, proto)
    spec = SuiteSpec(items("methods"), pairs, seeds, base, sweep, values)
    for m in spec.methods:
        dataclasses.replace(base_exp, method=m).validate()
    return spec


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(), str(path))


def load_suite(path) -> SuiteSpec:
    return parse_suite(Path(path).read_text(), str(path))


def format_run_config(rc: RunConfig) -> str:
    """Serialise a run config so that parsing it again yields the same run."""
    lines = []
    for f in dataclasses.fields(ExperimentConfig):
        lines.append(f"{f.name} = {getattr(rc.experiment, f.name)}")
    lines += ["", "[data]", f"prototype_seed = {rc.prototype_seed}"]
    for f in dataclasses.fields(GeneratorParams):
        lines.append(f"{f.name} = {getattr(rc.generator, f.name)!r}")
    for spec in rc.domains:
        lines += ["", f"[domain {spec.domain_id}]"]
        for f in dataclasses.fields(SyntheticDomainSpec):
            if f.name == "domain_id":
                continue
            v = getattr(spec, f.name)
            if f.name == "class_prior":
                if v is None:
                    continue
                v = ", ".join(repr(float(x)) for x in v)
            else:
                v = repr(v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
