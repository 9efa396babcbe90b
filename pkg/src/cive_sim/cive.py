"""Callback verification of a claimed caller ID (CIVE).

While a suspicious incoming call (the inCall) is still ringing at callee B,
B places an auxiliary call (the auCall) back to the number the inCall
claims to come from, and watches the auCall's setup signaling. The far
end's true call state leaks through that signaling:

  - a 180 with P-Early-Media sendonly means the far end is itself mid-dial,
    exactly what a genuine caller to B must be doing right now;
  - a 180 with sendrecv and no alert means an idle phone;
  - a call-waiting Alert-Info URN means a phone already on a call;
  - 486 means busy without call waiting; 181 means forwarding to voicemail.

If the inferred state is anything a genuine caller cannot be in while B's
phone rings, the claimed ID is judged spoofed. Inference failures are
never judged legitimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .call_fsm import CallPhase, expected_caller_state
from .netsim import Federation, SimEvent
from .sip_core import (
    AlertUrn,
    PemValue,
    PhoneNumber,
    SipMessage,
    SipMethod,
    StatusCode,
)


class CiveError(Exception):
    pass


class EmptyTrace(CiveError):
    pass


class LineBusy(CiveError):
    """The callee already has a verification call in flight."""


class UnsupportedPhase(CiveError):
    """Verification launches only while the incoming call is ringing."""


@dataclass(frozen=True)
class VerifierConfig:
    # How long to keep collecting after the first 180 that carries early
    # media, so a fast far-end answer can still land inside the capture.
    # Must exceed one link round trip.
    capture_grace_ms: int = 200
    au_call_timeout_ms: int = 10_000


@dataclass(frozen=True)
class IncomingCallContext:
    """What B knows about the suspicious incoming call when it rings."""

    claimed_id: PhoneNumber
    callee: PhoneNumber
    in_call_id: str
    phase: CallPhase
    t_start: int


class TraceDirection(str, Enum):
    SENT = "sent"
    RECEIVED = "received"


@dataclass(frozen=True)
class TraceEntry:
    t_ms: int
    direction: TraceDirection
    message: SipMessage


@dataclass
class SignalingTrace:
    """The auCall leg as observed at B: every message sent or received, in order."""

    entries: list[TraceEntry] = field(default_factory=list)
    timed_out: bool = False

    def append(self, t_ms: int, direction: TraceDirection, message: SipMessage) -> None:
        if self.entries and t_ms < self.entries[-1].t_ms:
            raise ValueError("trace timestamps must be non-decreasing")
        if not self.entries and not (
            direction is TraceDirection.SENT and message.method is SipMethod.INVITE
        ):
            raise ValueError("a trace starts with the sent INVITE")
        self.entries.append(TraceEntry(t_ms, direction, message))

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class FeatureVector:
    """Side-channel features of one auCall trace.

    ``pem_180``/``alert_180`` come from the first received 180;
    ``final_to_invite`` is the final response on the INVITE transaction;
    ``teardown`` is the request B sent to end the leg (BYE when the far
    end answered, CANCEL otherwise).
    """

    pem_180: PemValue | None = None
    alert_180: AlertUrn | None = None
    saw_181: bool = False
    saw_486: bool = False
    final_to_invite: StatusCode | None = None
    teardown: SipMethod | None = None
    timed_out: bool = False

    def __post_init__(self) -> None:
        if self.teardown is not None and self.teardown not in (
            SipMethod.BYE,
            SipMethod.CANCEL,
        ):
            raise ValueError("teardown must be BYE or CANCEL when present")

    def to_json_dict(self) -> dict:
        return {
            "pem_180": self.pem_180.value if self.pem_180 else None,
            "alert_180": self.alert_180.value if self.alert_180 else None,
            "saw_181": self.saw_181,
            "saw_486": self.saw_486,
            "final_to_invite": self.final_to_invite.code if self.final_to_invite else None,
            "teardown": self.teardown.value if self.teardown else None,
            "timed_out": self.timed_out,
        }


class InferredState(str, Enum):
    DIALING = "Dialing"
    IDLE = "Idle"
    CONNECTED = "Connected"
    BUSY_NO_WAITING = "BusyNoWaiting"
    FORWARDED_TO_VOICEMAIL = "ForwardedToVoicemail"
    UNREACHABLE = "Unreachable"
    UNKNOWN = "Unknown"


class Decision(str, Enum):
    LEGIT = "Legit"
    SPOOFED = "Spoofed"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    inferred: InferredState
    expected: str
    reason: str
    features: FeatureVector

    def __post_init__(self) -> None:
        if self.decision is Decision.SPOOFED and self.inferred in (
            InferredState.DIALING,
            InferredState.UNKNOWN,
            InferredState.UNREACHABLE,
        ):
            raise ValueError(f"Spoofed verdict incompatible with inferred {self.inferred}")
        if self.decision is Decision.LEGIT and self.inferred is not InferredState.DIALING:
            raise ValueError("Legit verdict requires an inferred Dialing state")

    def to_json_dict(self, trace_ref: str | None = None) -> dict:
        return {
            "decision": self.decision.value,
            "inferred": self.inferred.value,
            "expected": self.expected,
            "reason": self.reason,
            "features": self.features.to_json_dict(),
            "trace_ref": trace_ref,
        }


def extract_features(trace: SignalingTrace) -> FeatureVector:
    """Pure feature extraction from one auCall trace."""
    if not trace.entries:
        raise EmptyTrace("cannot extract features from an empty trace")
    invite = trace.entries[0].message
    pem_180: PemValue | None = None
    alert_180: AlertUrn | None = None
    saw_180 = False
    saw_181 = False
    saw_486 = False
    final: StatusCode | None = None
    sent_bye = False
    sent_cancel = False
    for entry in trace.entries:
        msg = entry.message
        if entry.direction is TraceDirection.RECEIVED and msg.is_response:
            assert msg.status is not None
            code = msg.status.code
            if code == 180 and not saw_180:
                saw_180 = True
                pem_180 = msg.pem
                alert_180 = msg.alert
            saw_181 = saw_181 or code == 181
            saw_486 = saw_486 or code == 486
            if final is None and msg.is_final and msg.cseq == invite.cseq:
                final = msg.status
        elif entry.direction is TraceDirection.SENT and msg.is_request:
            sent_bye = sent_bye or msg.method is SipMethod.BYE
            sent_cancel = sent_cancel or msg.method is SipMethod.CANCEL
    # BYE is what actually ends an answered leg, so it wins over a CANCEL
    # that crossed the answer in flight.
    teardown = (
        SipMethod.BYE if sent_bye else SipMethod.CANCEL if sent_cancel else None
    )
    return FeatureVector(
        pem_180=pem_180,
        alert_180=alert_180,
        saw_181=saw_181,
        saw_486=saw_486,
        final_to_invite=final,
        teardown=teardown,
        timed_out=trace.timed_out,
    )


def _match_rule(f: FeatureVector) -> tuple[int, InferredState, str]:
    if f.saw_486:
        return 1, InferredState.BUSY_NO_WAITING, "rule 1: 486 Busy Here, callee busy without call waiting"
    if f.saw_181:
        return 2, InferredState.FORWARDED_TO_VOICEMAIL, "rule 2: 181, leg forwarded to voicemail"
    if f.pem_180 is PemValue.SENDONLY:
        return 3, InferredState.DIALING, "rule 3: 180 early media sendonly, far end is mid-dial"
    if f.pem_180 is PemValue.SENDRECV and f.alert_180 is AlertUrn.CALL_WAITING:
        return 4, InferredState.CONNECTED, "rule 4: 180 sendrecv with call-waiting alert, far end on a call"
    if f.pem_180 is PemValue.SENDRECV and f.alert_180 is None:
        return 5, InferredState.IDLE, "rule 5: 180 sendrecv without alert, far end idle"
    no_ringing_evidence = f.pem_180 is None and f.alert_180 is None
    if f.timed_out or (f.final_to_invite is not None and f.final_to_invite.code == 480) or no_ringing_evidence:
        return 6, InferredState.UNREACHABLE, "rule 6: no usable ringing signal (timeout, 480, or no 180)"
    return 7, InferredState.UNKNOWN, "rule 7: signaling pattern matched no rule"


def infer_state(features: FeatureVector) -> InferredState:
    """Infer the far end's call state from the feature vector.

    Total and pure; the first matching rule wins:

      1. saw 486                          -> BusyNoWaiting
      2. saw 181                          -> ForwardedToVoicemail
      3. 180 pem sendonly                 -> Dialing
      4. 180 pem sendrecv + call-waiting  -> Connected
      5. 180 pem sendrecv, no alert       -> Idle
      6. timed out, final 480, or no 180  -> Unreachable
      7. otherwise                        -> Unknown

    Final-response rules (486, 181) come before the 180-based rules
    because those legs may carry no 180 at all. "No 180" is read off the
    vector as both 180 fields absent.
    """
    _, state, _ = _match_rule(features)
    return state

_SPOOFED_STATES = frozenset(
    {
        InferredState.IDLE,
        InferredState.CONNECTED,
        InferredState.BUSY_NO_WAITING,
        InferredState.FORWARDED_TO_VOICEMAIL,
    }
)


def decide(
    ctx: IncomingCallContext,
    inferred: InferredState,
    features: FeatureVector,
) -> Verdict:
    """Compare the inferred far-end state with what a genuine caller must be.

    While the inCall rings, a genuine caller is dialing the callee, so only
    an inferred Dialing is Legit. Any state a ringing caller cannot occupy
    is Spoofed. Unreachable/Unknown are Inconclusive, never Legit.
    """
    if ctx.phase is not CallPhase.RINGING:
        raise UnsupportedPhase("verdicts are only defined for the ringing phase")
    expected = expected_caller_state(ctx.phase, ctx.callee)
    _, _, reason = _match_rule(features)
    if inferred is InferredState.DIALING:
        decision = Decision.LEGIT
    elif inferred in _SPOOFED_STATES:
        decision = Decision.SPOOFED
    else:
        decision = Decision.INCONCLUSIVE
    return Verdict(
        decision=decision,
        inferred=inferred,
        expected=expected.description,
        reason=reason,
        features=features,
    )


class _VerifierAgent:
    """Event-driven auCall handler living on the callee's line.

    Collects responses until a 180 with early media has aged past the
    capture grace, a final response arrives, or the timeout fires; then
    tears the leg down: ACK+BYE when the far end answered, CANCEL while the
    INVITE is still pending, just ACK after a non-2xx final.
    """

    def __init__(self, net: Federation, ctx: IncomingCallContext, config: VerifierConfig):
        self.net = net
        self.ctx = ctx
        self.config = config
        self.carrier_id = net.lines[ctx.callee].carrier_id
        self.owner_id = f"cive:{ctx.callee}"
        self.trace = SignalingTrace()
        self.call_id = net.new_call_id()
        self.invite = SipMessage.request(
            SipMethod.INVITE, ctx.callee, ctx.claimed_id, self.call_id
        )
        self.next_cseq = 2
        self.final: StatusCode | None = None
        self.got_200 = False
        self.sent_cancel = False
        self.sent_bye = False
        self.done = False
        self.grace_timer: int | None = None
        self.timeout_timer: int | None = None

    def start(self) -> None:
        self.timeout_timer = self.net.set_timer(
            self.owner_id, self.config.au_call_timeout_ms, "au_timeout"
        )
        self._send(self.invite)

    # -- wire helpers --------------------------------------------------------

    def _send(self, msg: SipMessage) -> None:
        self.trace.append(self.net.now, TraceDirection.SENT, msg)
        self.net.send(self.owner_id, msg)

    def _request(self, method: SipMethod) -> SipMessage:
        if method in (SipMethod.ACK, SipMethod.CANCEL):
            seq = self.invite.cseq[0]
        else:
            seq = self.next_cseq
            self.next_cseq += 1
        return SipMessage(
            method=method,
            from_number=self.invite.from_number,
            to_number=self.invite.to_number,
            call_id=self.call_id,
            cseq=(seq, method),
        )

    def _finish(self) -> None:
        self.done = True
        if self.grace_timer is not None:
            self.net.cancel_timer(self.grace_timer)
            self.grace_timer = None
        if self.timeout_timer is not None:
            self.net.cancel_timer(self.timeout_timer)
            self.timeout_timer = None

    # -- event handlers --------------------------------------------------------

    def handle_message(self, event: SimEvent) -> None:
        msg = event.message
        if self.done:
            return
        self.trace.append(self.net.now, TraceDirection.RECEIVED, msg)
        if not msg.is_response:
            return
        tx_method = msg.cseq[1]
        if tx_method is SipMethod.BYE:
            if self.sent_bye:
                self._finish()
            return
        if tx_method is not SipMethod.INVITE:
            return  # response to CANCEL (200 or 481); recorded, nothing to do
        assert msg.status is not None
        code = msg.status.code
        if code < 200:
            if code == 183:
                self._send(self._request(SipMethod.PRACK))
            elif code == 180 and msg.pem is not None and self.grace_timer is None:
                self.grace_timer = self.net.set_timer(
                    self.owner_id, self.config.capture_grace_ms, "grace"
                )
            return
        self.final = msg.status
        if self.grace_timer is not None:
            self.net.cancel_timer(self.grace_timer)
            self.grace_timer = None
        if code == 200:
            self.got_200 = True
            self._send(self._request(SipMethod.ACK))
            self.sent_bye = True
            self._send(self._request(SipMethod.BYE))
            # done once the BYE is answered
        else:
            self._send(self._request(SipMethod.ACK))
            self._finish()

    def handle_timer(self, tag: str, data: tuple = ()) -> None:
        if self.done:
            return
        if tag == "grace":
            self.grace_timer = None
            if self.final is None and not self.sent_cancel:
                self.sent_cancel = True
                self._send(self._request(SipMethod.CANCEL))
        elif tag == "au_timeout":
            self.timeout_timer = None
            self.trace.timed_out = True
            if self.final is None and not self.sent_cancel:
                self.sent_cancel = True
                self._send(self._request(SipMethod.CANCEL))


def launch_verification(
    net: Federation,
    ctx: IncomingCallContext,
    config: VerifierConfig | None = None,
) -> SignalingTrace:
    """Place the auCall and capture its signaling trace.

    Drives the federation until the verification leg has been fully torn
    down (or the simulation drains), then returns the trace including the
    teardown exchange. Raises UnsupportedPhase for an answered-phase
    context and LineBusy when a verification is already running on this
    callee's line.
    """
    if ctx.phase is not CallPhase.RINGING:
        raise UnsupportedPhase("verification launches only while the inCall rings")
    if ctx.callee not in net.lines:
        raise CiveError(f"callee {ctx.callee} is not registered")
    config = config or VerifierConfig()
    owner_id = f"cive:{ctx.callee}"
    existing = net.owners.get(owner_id)
    if existing is not None and not getattr(existing, "done", True):
        raise LineBusy(f"{ctx.callee} already has a verification in flight")
    agent = _VerifierAgent(net, ctx, config)
    net.attach_agent(owner_id, agent)
    agent.start()
    net.run(stop_when=lambda: agent.done)
    if not agent.done:
        # The queue drained without the leg completing; the trace stands as
        # captured with its timeout flag.
        agent.trace.timed_out = agent.trace.timed_out or agent.final is None
    return agent.trace


def verify_incoming(
    net: Federation,
    ctx: IncomingCallContext,
    config: VerifierConfig | None = None,
) -> tuple[Verdict, SignalingTrace]:
    """Full pipeline: auCall, feature extraction, inference, verdict."""
    trace = launch_verification(net, ctx, config)
    features = extract_features(trace)
    inferred = infer_state(features)
    return decide(ctx, inferred, features), trace


def legs_from_trace_rows(rows: list[dict]) -> list[tuple[str, str, SignalingTrace]]:
    """Rebuild per-leg signaling traces from a saved federation trace.

    For every call id whose first row is an INVITE leaving an endpoint hop,
    reconstructs the leg as seen by that endpoint: its egress rows become
    sent entries, ingress rows addressed to it become received entries.
    Returns (call_id, observer_hop, trace) triples in file order.
    """
    from .sip_core import parse_message

    order: list[str] = []
    first_egress: dict[str, dict] = {}
    for row in rows:
        cid_msg = parse_message(row["sip"])
        row["_msg"] = cid_msg
        cid = cid_msg.call_id
        if cid not in first_egress and row["dir"] == "egress":
            first_egress[cid] = row
            order.append(cid)
    legs: list[tuple[str, str, SignalingTrace]] = []
    for cid in order:
        first = first_egress[cid]
        msg = first["_msg"]
        if not (msg.is_request and msg.method is SipMethod.INVITE):
            continue
        observer = first["from_hop"]
        if not observer.startswith("ep:"):
            continue
        trace = SignalingTrace()
        for row in rows:
            if row["_msg"].call_id != cid:
                continue
            if row["dir"] == "egress" and row["from_hop"] == observer:
                trace.append(row["t_ms"], TraceDirection.SENT, row["_msg"])
            elif row["dir"] == "ingress" and row["to_hop"] == observer:
                trace.append(row["t_ms"], TraceDirection.RECEIVED, row["_msg"])
        legs.append((cid, observer, trace))
    return legs
