"""Scenario definitions, the batch runner, and verdict-vs-truth reporting.

A scenario file (``.scn``, YAML) declares carriers, parties with their
initial states and features, one call origination (possibly spoofed), and
the ground truth label. Schema:

    name: c2
    description: optional free text
    seed: 0                  # optional, default 0
    cive: true               # run verification when the target rings
    ground_truth: spoofed    # spoofed | genuine
    carriers:
      - id: cn-a
        enforce_caller_id: false
        link_delay_ms: 50    # optional
        jitter_ms: 0         # optional
    parties:
      - number: "+15550100"
        carrier: cn-a
        call_waiting: false      # optional
        voicemail_forward: false # optional
        state: idle              # idle | dialing | connected | held
        peer: "+15550102"        # required for non-idle states
    origination:
      originator: "+15559900"
      claimed: "+15550100"
      target: "+15550101"
      at_ms: 0               # optional

Ground truth must be consistent with the origination: a claimed From that
differs from the originator's own number is spoofed, same number is
genuine. Every referenced number must be registered by some party.

Outputs per run: ``<name>.trace.jsonl`` (the federation event log) and
``<name>.report.json`` (verdict, match, display). The matrix command runs
the full deterministic grid of callee states x features x origination and
writes ``matrix.csv`` with fixed columns
``scenario,a_state,cw,vm,origination,inferred,verdict,truth,match``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import yaml

from .call_fsm import CalleeProfile, CallPhase, Connected, Dialing, Held
from .cive import (
    Decision,
    IncomingCallContext,
    Verdict,
    verify_incoming,
)
from .netsim import DEFAULT_MAX_SIM_MS, Federation, GatewayPolicy, PhoneLine
from .sip_core import PhoneNumber


class ScenarioError(Exception):
    pass


class ScenarioParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    pass


class GroundTruth(str, Enum):
    GENUINE = "genuine"
    SPOOFED = "spoofed"


_PARTY_STATES = ("idle", "dialing", "connected", "held")


@dataclass(frozen=True)
class CarrierSpec:
    id: str
    enforce_caller_id: bool = False
    link_delay_ms: int = 50
    jitter_ms: int = 0


@dataclass(frozen=True)
class PartySpec:
    number: PhoneNumber
    carrier: str
    call_waiting: bool = False
    voicemail_forward: bool = False
    state: str = "idle"
    peer: PhoneNumber | None = None


@dataclass(frozen=True)
class OriginationSpec:
    originator: PhoneNumber
    claimed: PhoneNumber
    target: PhoneNumber
    at_ms: int = 0


@dataclass(frozen=True)
class Scenario:
    name: str
    carriers: tuple[CarrierSpec, ...]
    parties: tuple[PartySpec, ...]
    origination: OriginationSpec
    cive_enabled: bool = True
    seed: int = 0
    ground_truth: GroundTruth = GroundTruth.GENUINE
    description: str = ""

    def validate(self) -> None:
        numbers = [p.number for p in self.parties]
        if len(set(numbers)) != len(numbers):
            raise ScenarioValidationError("duplicate party numbers")
        carrier_ids = {c.id for c in self.carriers}
        if len(carrier_ids) != len(self.carriers):
            raise ScenarioValidationError("duplicate carrier ids")
        registered = set(numbers)
        for p in self.parties:
            if p.carrier not in carrier_ids:
                raise ScenarioValidationError(f"party {p.number}: unknown carrier {p.carrier}")
            if p.state not in _PARTY_STATES:
                raise ScenarioValidationError(f"party {p.number}: bad state {p.state!r}")
            if p.state != "idle":
                if p.peer is None:
                    raise ScenarioValidationError(f"party {p.number}: state {p.state} needs a peer")
                if p.peer not in registered:
                    raise ScenarioValidationError(f"party {p.number}: peer {p.peer} not registered")
        o = self.origination
        for role, num in (("originator", o.originator), ("claimed", o.claimed), ("target", o.target)):
            if num not in registered:
                raise ScenarioValidationError(f"origination {role} {num} not registered")
        if o.at_ms < 0:
            raise ScenarioValidationError("origination at_ms must be >= 0")
        spoofed = o.claimed != o.originator
        if spoofed and self.ground_truth is not GroundTruth.SPOOFED:
            raise ScenarioValidationError(
                "claimed differs from originator but ground_truth is not spoofed"
            )
        if not spoofed and self.ground_truth is not GroundTruth.GENUINE:
            raise ScenarioValidationError(
                "claimed equals originator but ground_truth is not genuine"
            )


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ScenarioParseError(f"{where}: missing key {key!r}")
    return mapping[key]


def _number(value, where: str) -> PhoneNumber:
    try:
        return PhoneNumber(str(value))
    except ValueError as exc:
        raise ScenarioValidationError(f"{where}: {exc}") from exc


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate one ``.scn`` file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioParseError(f"{path}: expected a mapping at top level")

    try:
        carriers = tuple(
            CarrierSpec(
                id=str(_require(c, "id", "carrier")),
                enforce_caller_id=bool(c.get("enforce_caller_id", False)),
                link_delay_ms=int(c.get("link_delay_ms", 50)),
                jitter_ms=int(c.get("jitter_ms", 0)),
            )
            for c in _require(raw, "carriers", path.name)
        )
        parties = tuple(
            PartySpec(
                number=_number(_require(p, "number", "party"), "party number"),
                carrier=str(_require(p, "carrier", "party")),
                call_waiting=bool(p.get("call_waiting", False)),
                voicemail_forward=bool(p.get("voicemail_forward", False)),
                state=str(p.get("state", "idle")),
                peer=_number(p["peer"], "party peer") if p.get("peer") is not None else None,
            )
            for p in _require(raw, "parties", path.name)
        )
        o = _require(raw, "origination", path.name)
        origination = OriginationSpec(
            originator=_number(_require(o, "originator", "origination"), "originator"),
            claimed=_number(_require(o, "claimed", "origination"), "claimed"),
            target=_number(_require(o, "target", "origination"), "target"),
            at_ms=int(o.get("at_ms", 0)),
        )
        truth_raw = str(_require(raw, "ground_truth", path.name))
        try:
            truth = GroundTruth(truth_raw)
        except ValueError as exc:
            raise ScenarioValidationError(f"bad ground_truth: {truth_raw!r}") from exc
        scenario = Scenario(
            name=str(_require(raw, "name", path.name)),
            carriers=carriers,
            parties=parties,
            origination=origination,
            cive_enabled=bool(raw.get("cive", True)),
            seed=int(raw.get("seed", 0)),
            ground_truth=truth,
            description=str(raw.get("description", "")),
        )
    except (TypeError, KeyError, AttributeError) as exc:
        raise ScenarioParseError(f"{path}: malformed scenario: {exc}") from exc
    scenario.validate()
    return scenario


@dataclass(frozen=True)
class RunReport:
    """Outcome of one scenario run, scored against its ground truth.

    ``match`` is True when (Legit <=> genuine); an Inconclusive verdict is
    a non-match with the ``inconclusive`` flag set. Runs without
    verification carry match=None.
    """

    scenario: str
    ground_truth: GroundTruth
    cive_enabled: bool
    seed: int
    b_display: PhoneNumber | None
    verdict: Verdict | None
    match: bool | None
    inconclusive: bool
    policy_violations: int
    sim_ms: int
    trace_file: str | None

    def to_json_dict(self) -> dict:
        trace_ref = (
            None
            if self.trace_file is None or self.verdict is None
            else self.trace_file
        )
        return {
            "scenario": self.scenario,
            "ground_truth": self.ground_truth.value,
            "cive_enabled": self.cive_enabled,
            "seed": self.seed,
            "b_display": str(self.b_display) if self.b_display else None,
            "verdict": self.verdict.to_json_dict(trace_ref) if self.verdict else None,
            "match": self.match,
            "inconclusive": self.inconclusive,
            "policy_violations": self.policy_violations,
            "sim_ms": self.sim_ms,
            "trace_file": self.trace_file,
        }


def build_federation(s: Scenario, seed: int | None = None) -> Federation:
    """Materialize a scenario's carriers, parties and initial states."""
    net = Federation(seed=s.seed if seed is None else seed)
    for c in s.carriers:
        net.add_carrier(
            c.id,
            GatewayPolicy(
                enforce_caller_id=c.enforce_caller_id,
                link_delay_ms=c.link_delay_ms,
                jitter_ms=c.jitter_ms,
            ),
        )
    for p in s.parties:
        line = net.register_subscriber(
            p.carrier,
            p.number,
            CalleeProfile(
                number=p.number,
                call_waiting=p.call_waiting,
                voicemail_forward=p.voicemail_forward,
            ),
        )
        if p.state == "dialing":
            line.preset_state(Dialing(p.peer))  # type: ignore[arg-type]
        elif p.state == "connected":
            line.preset_state(Connected(p.peer))  # type: ignore[arg-type]
        elif p.state == "held":
            line.preset_state(Held(p.peer))  # type: ignore[arg-type]
    return net


def run_scenario(
    s: Scenario,
    out_dir: str | Path | None = None,
    *,
    seed: int | None = None,
    cive_enabled: bool | None = None,
    max_sim_ms: int = DEFAULT_MAX_SIM_MS,
) -> RunReport:
    """Run one scenario to quiescence and score the verdict.

    When the origination's target starts ringing and verification is
    enabled, the callback pipeline runs at that simulated instant; the
    rest of the signaling then drains. Equal (scenario, seed) pairs
    produce byte-identical trace and report files.
    """
    s.validate()
    effective_seed = s.seed if seed is None else seed
    effective_cive = s.cive_enabled if cive_enabled is None else cive_enabled
    net = build_federation(s, seed=effective_seed)
    target_line: PhoneLine = net.lines[s.origination.target]

    pending_ctx: list[IncomingCallContext] = []

    def on_ring(invite, t_ms):
        if not pending_ctx:
            pending_ctx.append(
                IncomingCallContext(
                    claimed_id=invite.from_number,
                    callee=target_line.number,
                    in_call_id=invite.call_id,
                    phase=CallPhase.RINGING,
                    t_start=t_ms,
                )
            )

    target_line.ring_hook = on_ring
    net.originate_call(
        s.origination.claimed,
        net.lines[s.origination.originator],
        s.origination.target,
        at_ms=s.origination.at_ms,
    )

    verdict: Verdict | None = None
    if effective_cive:
        net.run(stop_when=lambda: bool(pending_ctx), max_sim_ms=max_sim_ms)
        if pending_ctx:
            verdict, _trace = verify_incoming(net, pending_ctx[0])
    net.run_until_quiescent(max_sim_ms)

    match: bool | None = None
    inconclusive = False
    if verdict is not None:
        inconclusive = verdict.decision is Decision.INCONCLUSIVE
        match = not inconclusive and (
            (verdict.decision is Decision.LEGIT)
            == (s.ground_truth is GroundTruth.GENUINE)
        )

    trace_file = f"{s.name}.trace.jsonl" if out_dir is not None else None
    report = RunReport(
        scenario=s.name,
        ground_truth=s.ground_truth,
        cive_enabled=effective_cive,
        seed=effective_seed,
        b_display=target_line.display,
        verdict=verdict,
        match=match,
        inconclusive=inconclusive,
        policy_violations=len(net.policy_violations),
        sim_ms=net.now,
        trace_file=trace_file,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        net.write_trace(out / trace_file)
        (out / f"{s.name}.report.json").write_text(
            json.dumps(report.to_json_dict(), indent=2) + "\n", encoding="utf-8"
        )
    return report


# -- the deterministic scenario grid -----------------------------------------

_MATRIX_A = PhoneNumber("+15550100")  # the claimed / genuine caller
_MATRIX_B = PhoneNumber("+15550101")  # the verifying callee
_MATRIX_C = PhoneNumber("+15550102")  # a third party A can be busy with
_MATRIX_E = PhoneNumber("+15559900")  # the attacker, on a lax carrier

MATRIX_A_STATES = ("idle", "dialing_b", "dialing_other", "connected", "held")

CSV_COLUMNS = (
    "scenario",
    "a_state",
    "cw",
    "vm",
    "origination",
    "inferred",
    "verdict",
    "truth",
    "match",
)


@dataclass(frozen=True)
class MatrixRow:
    scenario: str
    a_state: str
    cw: bool
    vm: bool
    origination: str
    inferred: str
    verdict: str
    truth: str
    match: bool

    def csv_values(self) -> tuple[str, ...]:
        return (
            self.scenario,
            self.a_state,
            str(self.cw).lower(),
            str(self.vm).lower(),
            self.origination,
            self.inferred,
            self.verdict,
            self.truth,
            str(self.match).lower(),
        )


def _matrix_cell(a_state: str, cw: bool, vm: bool, origination: str) -> Scenario:
    party_state = {
        "idle": ("idle", None),
        "dialing_b": ("idle", None),  # the origination itself dials B
        "dialing_other": ("dialing", _MATRIX_C),
        "connected": ("connected", _MATRIX_C),
        "held": ("held", _MATRIX_C),
    }[a_state]
    genuine = origination == "genuine"
    name = f"matrix-{a_state}-cw{int(cw)}-vm{int(vm)}-{origination}"
    return Scenario(
        name=name,
        carriers=(CarrierSpec("cn-a"), CarrierSpec("cn-x")),
        parties=(
            PartySpec(_MATRIX_A, "cn-a", cw, vm, party_state[0], party_state[1]),
            PartySpec(_MATRIX_B, "cn-a"),
            PartySpec(_MATRIX_C, "cn-a"),
            PartySpec(_MATRIX_E, "cn-x"),
        ),
        origination=OriginationSpec(
            originator=_MATRIX_A if genuine else _MATRIX_E,
            claimed=_MATRIX_A,
            target=_MATRIX_B,
        ),
        cive_enabled=True,
        seed=0,
        ground_truth=GroundTruth.GENUINE if genuine else GroundTruth.SPOOFED,
    )


def matrix_scenarios() -> list[Scenario]:
    """The full deterministic grid.

    Genuine origination is only compatible with A dialing B (the
    origination is that dial); a spoofed origination while A is itself
    dialing B is skipped, since it would stack two simultaneous incoming
    calls at B. Spoofing a number that is mid-call elsewhere is included
    via the dialing_other state.
    """
    cells = []
    for a_state in MATRIX_A_STATES:
        for origination in ("genuine", "spoofed"):
            if (origination == "genuine") != (a_state == "dialing_b"):
                continue
            for cw in (False, True):
                for vm in (False, True):
                    cells.append(_matrix_cell(a_state, cw, vm, origination))
    return cells


@dataclass(frozen=True)
class MatrixResult:
    rows: tuple[MatrixRow, ...]

    @property
    def all_match(self) -> bool:
        return all(r.match for r in self.rows)

    @property
    def spoofed_judged_legit(self) -> int:
        return sum(1 for r in self.rows if r.truth == "spoofed" and r.verdict == "Legit")

    @property
    def any_inconclusive(self) -> bool:
        return any(r.verdict == "Inconclusive" for r in self.rows)

    def to_csv(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        lines.extend(",".join(r.csv_values()) for r in self.rows)
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        widths = [len(c) for c in CSV_COLUMNS]
        rows = [r.csv_values() for r in self.rows]
        for values in rows:
            widths = [max(w, len(v)) for w, v in zip(widths, values)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [fmt.format(*CSV_COLUMNS)]
        out.extend(fmt.format(*values) for values in rows)
        matched = sum(1 for r in self.rows if r.match)
        out.append(f"match rate: {matched}/{len(self.rows)}")
        return "\n".join(out)


def run_matrix(out_dir: str | Path | None = None) -> MatrixResult:
    """Run every matrix cell and report verdict vs truth per cell.

    Rows are sorted by scenario name. With ``out_dir`` set, per-cell trace
    and report files land under ``out_dir/cells`` and the CSV summary at
    ``out_dir/matrix.csv``.
    """
    cells_dir = None
    if out_dir is not None:
        cells_dir = Path(out_dir) / "cells"
        cells_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in sorted(matrix_scenarios(), key=lambda s: s.name):
        report = run_scenario(s, cells_dir)
        verdict = report.verdict
        assert verdict is not None
        parts = s.name.split("-")
        rows.append(
            MatrixRow(
                scenario=s.name,
                a_state=parts[1],
                cw=parts[2] == "cw1",
                vm=parts[3] == "vm1",
                origination=parts[4],
                inferred=verdict.inferred.value,
                verdict=verdict.decision.value,
                truth=report.ground_truth.value,
                match=bool(report.match),
            )
        )
    result = MatrixResult(rows=tuple(rows))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "matrix.csv").write_text(result.to_csv(), encoding="utf-8")
    return result


def exit_code_for(reports: list[RunReport]) -> int:
    """CLI exit code: 0 all match, 2 inconclusive only, 1 any mismatch."""
    mismatch = any(r.match is False and not r.inconclusive for r in reports)
    if mismatch:
        return 1
    if any(r.inconclusive for r in reports):
        return 2
    return 0
