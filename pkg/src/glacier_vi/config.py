"""Flat `section.key = value` configuration files.

Lines starting with '#' are comments.  Keys ending in `_yr` are given in
years and stored in seconds under the key without the suffix.  Lists are
comma separated.
"""

import dataclasses
from dataclasses import dataclass, field

from .errors import InvalidArgument
from .stokes import SECPERA


@dataclass
class MeshConfig:
    L: float = 100.0e3
    nx: int = 400
    nz: int = 40
    H_min: float = 10.0


@dataclass
class PhysicsConfig:
    p: float = 4.0 / 3.0
    A: float = 3.1689e-24
    nu_p: float = None
    eps: float = 1.0e-19
    rho_i: float = 910.0
    g: float = 9.81
    H_scale: float = 1000.0
    L_scale: float = 100.0e3


@dataclass
class StepSection:
    dt: float = 1.0 * SECPERA
    mode: str = "semi_implicit"
    r_exp: float = 2.0
    vi_tol: float = 1e-6
    max_active_set_iters: int = 100
    fssa: bool = True
    fssa_theta: float = 1.0
    stokes_tol: float = 1e-6
    max_newton: int = 50
    max_halvings: int = 4


@dataclass
class BedSection:
    kind: str = "flat"
    wavelengths: list = field(default_factory=lambda: [100.0e3, 40.0e3, 20.0e3, 10.0e3])
    amplitudes: list = field(default_factory=lambda: [120.0, 60.0, 40.0, 20.0])
    rough_wavelength: float = 4.0e3
    rough_amplitude: float = 30.0


@dataclass
class DomeSection:
    H0: float = None          # derived from R0, t0 and the flow law when unset
    R0: float = 70.0e3
    t0: float = 29.0 * SECPERA


@dataclass
class RunSection:
    T: float = 200.0 * SECPERA
    snapshot: float = 1.0 * SECPERA
    smb: float = 0.0
    smb_list: list = field(default_factory=lambda: [-2.5e-7, 0.0, 1.0e-7])
    beds: list = field(default_factory=lambda: ["flat", "smooth", "rough"])


@dataclass
class SamplingSection:
    n_pairs: int = 1000
    seed: int = 20240501
    mask: float = None
    alpha: float = 1.0e-13      # coercivity constant used by error terms
    coarse_nx: int = 100
    active_tol: float = 1.0


@dataclass
class ExperimentConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    step: StepSection = field(default_factory=StepSection)
    bed: BedSection = field(default_factory=BedSection)
    dome: DomeSection = field(default_factory=DomeSection)
    run: RunSection = field(default_factory=RunSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    out: str = "out"

    def validate(self):
        m, s, r, sa = self.mesh, self.step, self.run, self.sampling
        checks = [
            (m.L > 0, "mesh.L must be positive"),
            (m.nx >= 2, "mesh.nx must be >= 2"),
            (m.nz >= 1, "mesh.nz must be >= 1"),
            (m.H_min > 0, "mesh.H_min must be positive"),
            (s.dt > 0, "step.dt must be positive"),
            (s.vi_tol > 0, "step.vi_tol must be positive"),
            (s.r_exp >= 2, "step.r_exp must be >= 2"),
            (r.T >= 0, "run.T must be nonnegative"),
            (r.snapshot > 0, "run.snapshot must be positive"),
            (sa.n_pairs >= 1, "sampling.n_pairs must be >= 1"),
            (sa.mask is None or sa.mask >= 0, "sampling.mask must be nonnegative"),
            (sa.alpha > 0, "sampling.alpha must be positive"),
            (self.bed.kind in ("flat", "smooth", "rough"), f"bed.kind {self.bed.kind!r} unknown"),
            (len(self.bed.wavelengths) == len(self.bed.amplitudes), "bed wavelengths/amplitudes differ in length"),
            (all(k in ("flat", "smooth", "rough") for k in r.beds), "run.beds has an unknown bed kind"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidArgument(msg)
        from .surface import MODES
        if s.mode not in MODES:
            raise InvalidArgument(f"step.mode {s.mode!r} unknown")
        self.phys_params()
        return self

    def phys_params(self):
        from .stokes import PhysParams
        return PhysParams(**dataclasses.asdict(self.physics))

    def to_text(self):
        """Serialize every field (SI units) in the same key = value form."""
        lines = []
        for sec in dataclasses.fields(self):
            val = getattr(self, sec.name)
            if not dataclasses.is_dataclass(val):
                lines.append(f"{sec.name} = {val}")
                continue
            for f in dataclasses.fields(val):
                v = getattr(val, f.name)
                if v is None:
                    continue
                if isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                lines.append(f"{sec.name}.{f.name} = {v!r}" if isinstance(v, float) else f"{sec.name}.{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(raw, proto, key, ftype):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    try:
        if isinstance(proto, bool) or ftype is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(proto, list):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if proto and isinstance(proto[0], str):
                return items
            return [float(x) for x in items]
        if isinstance(proto, int) or ftype is int:
            return int(raw)
        if isinstance(proto, str) or ftype is str:
            return raw
        return float(raw)
    except ValueError:
        raise InvalidArgument(f"bad value for {key}: {raw!r}") from None


def apply(cfg, key, raw):
    if "." not in key:
        if key == "out":
            cfg.out = raw.strip()
            return
        raise InvalidArgument(f"unknown config key {key!r}")
    sec_name, name = key.split(".", 1)
    sec = getattr(cfg, sec_name, None)
    if sec is None or not dataclasses.is_dataclass(sec):
        raise InvalidArgument(f"unknown config key {key!r}")
    scale = 1.0
    if name.endswith("_yr"):
        name, scale = name[:-3], SECPERA
    fields = {f.name: f for f in dataclasses.fields(sec)}
    if name not in fields:
        raise InvalidArgument(f"unknown config key {key!r}")
    proto = getattr(sec, name)
    ftype = fields[name].type if isinstance(fields[name].type, type) else None
    if proto is None and ftype is None:
        ftype = float
    val = _convert(raw, proto, key, ftype)
    if scale != 1.0:
        if isinstance(val, list):
            val = [v * scale for v in val]
        elif val is not None:
            val = val * scale
    setattr(sec, name, val)


def parse(text):
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        apply(cfg, key.strip(), raw)
    return cfg.validate()


def load(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as err:
        raise InvalidArgument(f"cannot read config {path}: {err}") from None
    return parse(text)
