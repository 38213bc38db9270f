"""INI-style problem configuration.

Example::

    [model]
    kind = two_state
    rate_up = 1.5
    rate_down = 2.0

    [problem]
    p = 2
    eta = 1.0, 2.0
    T = 1.0
    n_steps = 200
    x0 = 1.0
    z0 = 0

    [functional]
    density = 0.5, 2.0
    atoms = 0.5: 0.1, 0.3

    [terminal]
    kind = singular

    [run]
    seed = 12345
    n_paths = 20000

Lists are comma separated; ``atoms`` is a ``;`` separated list of
``time: f_1, ..., f_m`` entries. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .functional import AdditiveFunctional, ProblemSpec, TerminalCondition
from .markov import MarkovModel, TimeGrid, build_one_state, build_random_walk, build_two_state, uniform_states

MODEL_KINDS = ("one_state", "two_state", "random_walk")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _atoms(text: str) -> tuple:
    out = []
    for item in text.split(";"):
        if not item.strip():
            continue
        t, _, f = item.partition(":")
        if not _:
            raise ValueError(f"atom entry {item.strip()!r} must look like 'time: f1, f2'")
        out.append((float(t), _floats(f)))
    return tuple(out)


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        x = float(text)
        if not x.is_integer():
            raise ValueError(f"not an integer: {text!r}") from None
        return int(x)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "model": {
        "kind": str, "rate_up": float, "rate_down": float, "volatility": float,
        "z_min": float, "z_max": float, "n_states": _int, "boundary": str,
    },
    "problem": {
        "p": float, "eta": _floats, "gamma": float, "t0": float, "T": float,
        "n_steps": _int, "x0": float, "z0": _int,
    },
    "functional": {"density": _floats, "density_csv": str, "atoms": _atoms},
    "terminal": {
        "kind": str, "k": float, "rho": _floats, "k_schedule": _floats,
        "guard_steps": _int, "scheme": str,
    },
    "run": {
        "seed": _int, "n_paths": _int, "chunk_size": _int, "threads": _int, "output_dir": str,
        "multipliers": _floats, "feller": _bool, "feller_m0": float,
        "feller_lambdas": _floats, "feller_dt": float, "feller_paths": _int,
    },
}
REQUIRED = {"model": ("kind",), "problem": ("p", "T", "n_steps"), "terminal": ("kind",)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(f"{t!r}: " + ", ".join(repr(x) for x in f) for t, f in value)
        return ", ".join(repr(x) for x in value)
    return str(value)


@dataclass(frozen=True)
class Config:
    """Typed contents of a configuration file, keyed by section."""

    sections: dict = field(default_factory=dict)
    base_dir: Optional[Path] = field(default=None, compare=False)

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SCHEMA:
            if name in self.sections:
                cp[name] = {k: _format(v) for k, v in self.sections[name].items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def with_overrides(self, **run_items) -> "Config":
        sections = {k: dict(v) for k, v in self.sections.items()}
        run = sections.setdefault("run", {})
        for k, v in run_items.items():
            if v is not None:
                run[k] = v
        return Config(sections, self.base_dir)

    # builders

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.get("problem", "t0", 0.0), self.get("problem", "T"), self.get("problem", "n_steps"))

    def model(self) -> MarkovModel:
        tg = self.time_grid()
        kind = self.get("model", "kind")
        if kind == "one_state":
            return build_one_state(tg)
        if kind == "two_state":
            return build_two_state(self.get("model", "rate_up", 0.0), self.get("model", "rate_down", 0.0), tg)
        states = uniform_states(
            self.get("model", "z_min", -1.0), self.get("model", "z_max", 1.0), self.get("model", "n_states", 21)
        )
        return build_random_walk(self.get("model", "volatility", 1.0), states, tg, self.get("model", "boundary", "reflect"))

    def functional(self, model: MarkovModel) -> AdditiveFunctional:
        density = self.get("functional", "density", (0.0,))
        path = self.get("functional", "density_csv")
        if path is not None:
            p = Path(path)
            if not p.is_absolute() and self.base_dir is not None:
                p = self.base_dir / p
            table = np.loadtxt(p, delimiter=",", ndmin=2)
        else:
            table = density[0] if len(density) == 1 else np.array(density)
        atoms = [(t, f[0] if len(f) == 1 else np.array(f)) for t, f in self.get("functional", "atoms", ())]
        return AdditiveFunctional.build(model, density=table, atoms=atoms)

    def terminal(self) -> TerminalCondition:
        kind = self.get("terminal", "kind")
        if kind == "penalty_k":
            return TerminalCondition.penalty_k(self.get("terminal", "k"))
        if kind == "penalty_rho":
            return TerminalCondition.penalty_rho(np.array(self.get("terminal", "rho", ())))
        return TerminalCondition(kind)

    def spec(self) -> ProblemSpec:
        model = self.model()
        eta = self.get("problem", "eta", (1.0,))
        return ProblemSpec(
            model=model,
            p=self.get("problem", "p"),
            eta=eta[0] if len(eta) == 1 else np.array(eta),
            A=self.functional(model),
            terminal=self.terminal(),
            x0=self.get("problem", "x0", 1.0),
            z0=self.get("problem", "z0", 0),
            gamma=self.get("problem", "gamma"),
        )

    def validate(self) -> ProblemSpec:
        """Build every object once so that all preconditions are checked."""
        try:
            spec = self.spec()
        except (ValueError, TypeError, OSError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        ks = self.get("terminal", "k_schedule")
        if ks is not None and (len(ks) < 2 or any(b <= a for a, b in zip(ks, ks[1:]))):
            raise ConfigError("k_schedule must be strictly increasing with at least two entries")
        if self.get("terminal", "scheme", "exact") not in ("exact", "implicit"):
            raise ConfigError("terminal.scheme must be 'exact' or 'implicit'")
        if self.get("terminal", "kind") == "singular" and self.get("terminal", "scheme", "exact") != "exact":
            raise ConfigError("the singular terminal condition requires scheme = exact")
        n_paths = self.get("run", "n_paths")
        if n_paths is not None and n_paths < 2:
            raise ConfigError("run.n_paths must be at least 2")
        return spec


def parse_config(text: str, base_dir=None) -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    sections = {}
    for name in cp.sections():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        parsed = {}
        for key, raw in cp[name].items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            if not raw.strip():
                continue
            try:
                parsed[key] = SCHEMA[name][key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}.{key}: {exc}") from exc
        sections[name] = parsed
    for name, keys in REQUIRED.items():
        for key in keys:
            if key not in sections.get(name, {}):
                raise ConfigError(f"missing required key {name}.{key}")
    kind = sections["model"]["kind"]
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {MODEL_KINDS}")
    return Config(sections, None if base_dir is None else Path(base_dir))


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)
