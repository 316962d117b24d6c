"""
Line-oriented scenario files.

Each non-blank line is one directive; ``#`` starts a comment. Times accept a
``s``/``m``/``h``/``d`` suffix (``10d`` is 864000 seconds).

    config k=v ...
    participant <handle> <kind> [law_enforcement] [maker=] [insurer=] [pseudonyms=]
    ese <t> <vehicle> <code> [lat= lon=] [detail=]
    net <t> <label> <issuer> <vehicle> <software_update|part_change> subsystem=<s> [file=] [ack=yes|no]
    et <t> <vehicle> <net_label> <success|failure>
    device <vehicle> <net_label> <installed|stale|unavailable> [install_time=<t>]
    collision <t> <case> lat=<deg> lon=<deg>
    crash <case> <vehicle> order=<n> speed=<m/s> [events=a,b] [fault=<subsystem>] [video=<bytes>]
    witness <case> <witness> <subject> [events=a,b]
    attack <kind> <t> actors=a,b [variant=] [key=value ...]
    expect <case> level1=<vehicle> level2=<product|service|negligence>

``run`` executes the honest scenario; ``attack`` lines are only used by the
attack matrix, one script per line.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from bfica.errors import ScenarioError
from bfica.utils.crypto_identity import EntityKind
from bfica.utils.tx_model import ExecStatus, InstructionKind, Location

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"

TIME_UNITS = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}
DEVICE_STATES = ("installed", "stale", "unavailable")
LIABILITY_KINDS = ("product", "service", "negligence")
DEFAULT_PSEUDONYMS = 3


@dataclass(frozen=True)
class ParticipantSpec:
    handle: str
    kind: EntityKind
    law_enforcement: bool = False
    maker: Optional[str] = None
    insurer: Optional[str] = None
    pseudonyms: int = DEFAULT_PSEUDONYMS
    line_no: int = 0


@dataclass(frozen=True)
class EseSpec:
    t: float
    vehicle: str
    code: str
    loc: Optional[Location] = None
    detail: str = ""
    line_no: int = 0


@dataclass(frozen=True)
class NetSpec:
    t: float
    label: str
    issuer: str
    vehicle: str
    instruction: InstructionKind
    subsystem: str
    file: str
    ack: bool = True
    line_no: int = 0


@dataclass(frozen=True)
class EtSpec:
    t: float
    vehicle: str
    net_label: str
    status: ExecStatus
    line_no: int = 0


@dataclass(frozen=True)
class DeviceSpec:
    vehicle: str
    net_label: str
    state: str
    install_time: Optional[float] = None
    line_no: int = 0


@dataclass(frozen=True)
class CollisionSpec:
    t: float
    case: str
    loc: Location
    line_no: int = 0


@dataclass(frozen=True)
class CrashSpec:
    case: str
    vehicle: str
    order: int
    speed: float
    events: Tuple[str, ...] = ()
    fault: str = ""
    video: Optional[int] = None
    line_no: int = 0


@dataclass(frozen=True)
class WitnessSpec:
    case: str
    witness: str
    subject: str
    events: Tuple[str, ...] = ()
    line_no: int = 0


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    t: float
    actors: Tuple[str, ...]
    variant: str = "default"
    params: Tuple[Tuple[str, str], ...] = ()
    line_no: int = 0

    def param(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return dict(self.params).get(key, default)


@dataclass(frozen=True)
class Expectation:
    case: str
    level1: str
    level2: str
    line_no: int = 0


@dataclass
class Scenario:
    name: str
    config: Dict[str, str] = field(default_factory=dict)
    participants: List[ParticipantSpec] = field(default_factory=list)
    eses: List[EseSpec] = field(default_factory=list)
    nets: List[NetSpec] = field(default_factory=list)
    ets: List[EtSpec] = field(default_factory=list)
    devices: List[DeviceSpec] = field(default_factory=list)
    collisions: List[CollisionSpec] = field(default_factory=list)
    crashes: List[CrashSpec] = field(default_factory=list)
    witnesses: List[WitnessSpec] = field(default_factory=list)
    attacks: List[AttackSpec] = field(default_factory=list)
    expectations: List[Expectation] = field(default_factory=list)

    def participant(self, handle: str) -> Optional[ParticipantSpec]:
        for p in self.participants:
            if p.handle == handle:
                return p
        return None

    def net(self, label: str) -> Optional[NetSpec]:
        for n in self.nets:
            if n.label == label:
                return n
        return None

    def crashes_in(self, case: str) -> List[CrashSpec]:
        return [c for c in self.crashes if c.case == case]

    def isolate(self, vehicle: str) -> "Scenario":
        """
        Drops every other vehicle and every witness account from the cases
        ``vehicle`` crashes in, leaving it the only source of evidence.
        """
        cases = {c.case for c in self.crashes if c.vehicle == vehicle}
        crashes = [c for c in self.crashes if c.case not in cases or c.vehicle == vehicle]
        return dataclasses.replace(
            self,
            name=f"{self.name}+isolated:{vehicle}",
            crashes=crashes,
            witnesses=[w for w in self.witnesses if w.case not in cases],
            expectations=[
                e for e in self.expectations if e.case not in cases or e.level1 == vehicle
            ],
            participants=list(self.participants),
            config=dict(self.config),
        )


def parse_time(text: str, line_no: int = 0) -> float:
    value, scale = text, 1.0
    if text and text[-1] in TIME_UNITS:
        value, scale = text[:-1], TIME_UNITS[text[-1]]
    try:
        t = float(value) * scale
    except ValueError:
        raise ScenarioError(f"bad time {text!r}", line_no)
    if t < 0:
        raise ScenarioError(f"negative time {text!r}", line_no)
    return t


def _split(tokens: List[str], line_no: int) -> Tuple[List[str], Dict[str, str]]:
    positional: List[str] = []
    options: Dict[str, str] = {}
    for tok in tokens:
        if "=" in tok:
            key, _, value = tok.partition("=")
            if not key:
                raise ScenarioError(f"malformed option {tok!r}", line_no)
            options[key] = value
        else:
            positional.append(tok)
    return positional, options


def _need(positional: List[str], n: int, directive: str, line_no: int) -> None:
    if len(positional) != n:
        raise ScenarioError(f"'{directive}' takes {n} positional arguments, got {len(positional)}", line_no)


def _float(options: Dict[str, str], key: str, line_no: int, default: Optional[float] = None) -> float:
    if key not in options:
        if default is None:
            raise ScenarioError(f"missing {key}=", line_no)
        return default
    try:
        return float(options[key])
    except ValueError:
        raise ScenarioError(f"bad number for {key}: {options[key]!r}", line_no)


def _int(options: Dict[str, str], key: str, line_no: int, default: Optional[int] = None) -> int:
    if key not in options:
        if default is None:
            raise ScenarioError(f"missing {key}=", line_no)
        return default
    try:
        return int(options[key])
    except ValueError:
        raise ScenarioError(f"bad integer for {key}: {options[key]!r}", line_no)


def _list(options: Dict[str, str], key: str) -> Tuple[str, ...]:
    raw = options.get(key, "")
    return tuple(x for x in raw.split(",") if x)


def _loc(options: Dict[str, str], line_no: int, required: bool) -> Optional[Location]:
    if "lat" not in options and "lon" not in options and not required:
        return None
    return Location(_float(options, "lat", line_no), _float(options, "lon", line_no))


def _config(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    if pos:
        raise ScenarioError("config takes key=value pairs only", n)
    sc.config.update(opts)


def _participant(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    flags = [p for p in pos[2:] if p == "law_enforcement"]
    if len(pos) < 2 or len(pos) - 2 != len(flags):
        raise ScenarioError("participant <handle> <kind> [law_enforcement] [key=value ...]", n)
    try:
        kind = EntityKind(pos[1])
    except ValueError:
        raise ScenarioError(f"unknown participant kind {pos[1]!r}", n)
    sc.participants.append(ParticipantSpec(
        handle=pos[0],
        kind=kind,
        law_enforcement=bool(flags),
        maker=opts.get("maker"),
        insurer=opts.get("insurer"),
        pseudonyms=_int(opts, "pseudonyms", n, DEFAULT_PSEUDONYMS),
        line_no=n,
    ))


def _ese(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 3, "ese", n)
    sc.eses.append(EseSpec(parse_time(pos[0], n), pos[1], pos[2], _loc(opts, n, False),
                           opts.get("detail", ""), n))


def _net(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 5, "net", n)
    try:
        instruction = InstructionKind(pos[4])
    except ValueError:
        raise ScenarioError(f"unknown instruction kind {pos[4]!r}", n)
    if "subsystem" not in opts:
        raise ScenarioError("missing subsystem=", n)
    ack = opts.get("ack", "yes")
    if ack not in ("yes", "no"):
        raise ScenarioError(f"ack must be yes or no, got {ack!r}", n)
    sc.nets.append(NetSpec(parse_time(pos[0], n), pos[1], pos[2], pos[3], instruction,
                           opts["subsystem"], opts.get("file", pos[1]), ack == "yes", n))


def _et(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 4, "et", n)
    try:
        status = ExecStatus(pos[3])
    except ValueError:
        raise ScenarioError(f"unknown execution status {pos[3]!r}", n)
    sc.ets.append(EtSpec(parse_time(pos[0], n), pos[1], pos[2], status, n))


def _device(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 3, "device", n)
    if pos[2] not in DEVICE_STATES:
        raise ScenarioError(f"device state must be one of {DEVICE_STATES}", n)
    install = parse_time(opts["install_time"], n) if "install_time" in opts else None
    sc.devices.append(DeviceSpec(pos[0], pos[1], pos[2], install, n))


def _collision(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 2, "collision", n)
    loc = _loc(opts, n, True)
    assert loc is not None
    sc.collisions.append(CollisionSpec(parse_time(pos[0], n), pos[1], loc, n))


def _crash(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 2, "crash", n)
    video = _int(opts, "video", n) if "video" in opts else None
    sc.crashes.append(CrashSpec(
        pos[0], pos[1], _int(opts, "order", n), _float(opts, "speed", n),
        _list(opts, "events"), opts.get("fault", ""), video, n,
    ))


def _witness(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 3, "witness", n)
    sc.witnesses.append(WitnessSpec(pos[0], pos[1], pos[2], _list(opts, "events"), n))


def _attack(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 2, "attack", n)
    actors = _list(opts, "actors")
    if not actors:
        raise ScenarioError("attack needs actors=", n)
    params = tuple(sorted((k, v) for k, v in opts.items() if k not in ("actors", "variant")))
    sc.attacks.append(AttackSpec(pos[0], parse_time(pos[1], n), actors,
                                 opts.get("variant", "default"), params, n))


def _expect(pos: List[str], opts: Dict[str, str], n: int, sc: Scenario) -> None:
    _need(pos, 1, "expect", n)
    level2 = opts.get("level2", "")
    if level2 not in LIABILITY_KINDS:
        raise ScenarioError(f"level2 must be one of {LIABILITY_KINDS}", n)
    if "level1" not in opts:
        raise ScenarioError("missing level1=", n)
    sc.expectations.append(Expectation(pos[0], opts["level1"], level2, n))


DIRECTIVES: Dict[str, Callable[[List[str], Dict[str, str], int, Scenario], None]] = {
    "config": _config,
    "participant": _participant,
    "ese": _ese,
    "net": _net,
    "et": _et,
    "device": _device,
    "collision": _collision,
    "crash": _crash,
    "witness": _witness,
    "attack": _attack,
    "expect": _expect,
}


def parse_scenario(text: str, name: str = "<string>") -> Scenario:
    sc = Scenario(name)
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        directive, *rest = line.split()
        handler = DIRECTIVES.get(directive)
        if handler is None:
            raise ScenarioError(f"unknown directive {directive!r}", n)
        positional, options = _split(rest, n)
        handler(positional, options, n, sc)
    _check_references(sc)
    return sc


def _check_references(sc: Scenario) -> None:
    seen: Dict[str, ParticipantSpec] = {}
    for p in sc.participants:
        if p.handle in seen:
            raise ScenarioError(f"participant {p.handle!r} declared twice", p.line_no)
        if p.pseudonyms < 1:
            raise ScenarioError("pseudonyms must be at least 1", p.line_no)
        seen[p.handle] = p

    def expect_kind(handle: str, kinds: Tuple[EntityKind, ...], line_no: int) -> None:
        p = seen.get(handle)
        if p is None:
            raise ScenarioError(f"unknown participant {handle!r}", line_no)
        if p.kind not in kinds:
            names = "/".join(k.value for k in kinds)
            raise ScenarioError(f"{handle!r} is a {p.kind.value}, expected {names}", line_no)

    vehicle = (EntityKind.VEHICLE,)
    for p in sc.participants:
        if p.maker:
            expect_kind(p.maker, (EntityKind.MANUFACTURER,), p.line_no)
        if p.insurer:
            expect_kind(p.insurer, (EntityKind.INSURER,), p.line_no)
    for e in sc.eses:
        expect_kind(e.vehicle, vehicle, e.line_no)

    labels: Dict[str, NetSpec] = {}
    for net in sc.nets:
        if net.label in labels:
            raise ScenarioError(f"net label {net.label!r} reused", net.line_no)
        labels[net.label] = net
        expect_kind(net.issuer, (EntityKind.MANUFACTURER, EntityKind.TECHNICIAN), net.line_no)
        expect_kind(net.vehicle, vehicle, net.line_no)
    for et in sc.ets:
        expect_kind(et.vehicle, vehicle, et.line_no)
        if et.net_label not in labels:
            raise ScenarioError(f"unknown net label {et.net_label!r}", et.line_no)
    for d in sc.devices:
        expect_kind(d.vehicle, vehicle, d.line_no)
        if d.net_label not in labels:
            raise ScenarioError(f"unknown net label {d.net_label!r}", d.line_no)

    cases = {}
    for c in sc.collisions:
        if c.case in cases:
            raise ScenarioError(f"collision {c.case!r} declared twice", c.line_no)
        cases[c.case] = c
    for crash in sc.crashes:
        if crash.case not in cases:
            raise ScenarioError(f"crash in undeclared collision {crash.case!r}", crash.line_no)
        expect_kind(crash.vehicle, vehicle, crash.line_no)
    for w in sc.witnesses:
        if w.case not in cases:
            raise ScenarioError(f"witness in undeclared collision {w.case!r}", w.line_no)
        expect_kind(w.witness, vehicle, w.line_no)
        expect_kind(w.subject, vehicle, w.line_no)
        if not any(c.vehicle == w.subject for c in sc.crashes_in(w.case)):
            raise ScenarioError(f"{w.subject!r} did not crash in {w.case!r}", w.line_no)
    for a in sc.attacks:
        for actor in a.actors:
            if actor not in seen:
                raise ScenarioError(f"unknown attack actor {actor!r}", a.line_no)
    for x in sc.expectations:
        if x.case not in cases:
            raise ScenarioError(f"expectation for undeclared collision {x.case!r}", x.line_no)


def load_scenario(name_or_path: str) -> Scenario:
    """A bundled scenario by name, or a scenario file by path."""
    path = Path(name_or_path)
    if not path.exists():
        bundled = SCENARIO_DIR / f"{name_or_path}.scn"
        if not bundled.exists():
            raise ScenarioError(f"scenario not found: {name_or_path}")
        path = bundled
    return parse_scenario(path.read_text(encoding="utf-8"), path.stem)


def bundled_scenarios() -> List[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.scn"))
