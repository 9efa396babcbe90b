"""Deterministic discrete-event simulation of interconnected carrier networks.

A Federation hosts one or more carriers, each with registered subscriber
lines and a gateway policy. Messages move between hops (subscriber lines,
per-carrier network cores, voicemail services) over links with fixed delay
plus optional seeded jitter; events fire in (time, insertion order), so a
given (scenario, seed) always produces byte-identical traces.

Spoofing lives in ``originate_call``: the INVITE's From is whatever the
originator claims. A carrier whose policy enforces caller ID rejects a
mismatched claim at its own edge with a synthetic 480 back to the
originator; a permissive carrier forwards it untouched, which is the
attack. Responses and in-dialog requests are routed by dialog over the
path the real INVITE took, never by the (possibly forged) From header.

Trace log: one JSON object per line, fields in fixed order
``{t_ms, carrier, from_hop, to_hop, dir, sip}``. Every message produces an
egress row when it leaves its source hop and an ingress row when it
reaches its destination hop.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from . import call_fsm
from .call_fsm import (
    AutoAnswer,
    CalleeProfile,
    Connected,
    Dialing,
    EndpointState,
    Held,
    Idle,
    LegPhase,
    LegRole,
    SendRequest,
    SendResponse,
)
from .sip_core import (
    PhoneNumber,
    SipMessage,
    SipMethod,
    serialize_message,
)

DEFAULT_LINK_DELAY_MS = 50
DEFAULT_INVITE_PATIENCE_MS = 20_000
DEFAULT_MAX_SIM_MS = 60_000


class NetsimError(Exception):
    pass


class DuplicateNumber(NetsimError):
    """The number is already registered somewhere in the federation."""


class UnknownSubscriber(NetsimError):
    pass


class SimBudgetExceeded(NetsimError):
    """Events remained queued past the simulation budget (likely a livelock)."""


@dataclass(frozen=True)
class GatewayPolicy:
    """Per-carrier interconnect behavior.

    With ``enforce_caller_id`` set, no INVITE whose From differs from the
    originator's authenticated number leaves this carrier; it is rejected
    at the edge with a synthetic 480. Link delay applies once per carrier a
    message traverses; jitter adds a deterministic seeded 0..jitter_ms draw
    per link.
    """

    enforce_caller_id: bool = False
    link_delay_ms: int = DEFAULT_LINK_DELAY_MS
    jitter_ms: int = 0


@dataclass
class CarrierNetwork:
    id: str
    policy: GatewayPolicy = field(default_factory=GatewayPolicy)


class Direction(str, Enum):
    INGRESS = "ingress"
    EGRESS = "egress"


@dataclass(frozen=True)
class SimEvent:
    """A scheduled message delivery. Ties on ``at`` break by ``seq`` (FIFO)."""

    at: int
    seq: int
    deliver_to: str
    message: SipMessage
    direction: Direction
    from_hop: str
    to_hop: str


@dataclass(frozen=True)
class _Timer:
    at: int
    seq: int
    owner: str
    tag: str
    data: tuple
    timer_id: int


@dataclass
class _Dialog:
    uac: str  # owner id of the originating side
    uas: str  # owner id of the answering side (line, net core, or voicemail)


@dataclass
class _LineLeg:
    call_id: str
    peer: PhoneNumber
    role: LegRole
    phase: LegPhase
    invite: SipMessage
    next_cseq: int = 2
    auto_answer_timer: int | None = None
    patience_timer: int | None = None


def _hop_label(owner_id: str) -> str:
    kind, _, rest = owner_id.partition(":")
    if kind in ("line", "cive"):
        return f"ep:{rest}"
    return owner_id


class PhoneLine:
    """A subscriber's phone: FSM driver plus leg and timer bookkeeping.

    Single-owner: exactly one event loop drives a line.
    """

    def __init__(self, net: "Federation", carrier_id: str, profile: CalleeProfile):
        self.net = net
        self.carrier_id = carrier_id
        self.profile = profile
        self.owner_id = f"line:{profile.number}"
        self.state: EndpointState = Idle()
        self.legs: dict[str, _LineLeg] = {}
        self.display: PhoneNumber | None = None
        # Called with (invite, t_ms) when the phone starts alerting for an
        # incoming call; the scenario runner hangs verification off this.
        self.ring_hook: Callable[[SipMessage, int], None] | None = None

    @property
    def number(self) -> PhoneNumber:
        return self.profile.number

    # -- preset support (scenario initial conditions) ----------------------

    def preset_state(self, state: EndpointState) -> None:
        """Install a summary initial state with a synthetic backing leg.

        Preset legs exist only as local bookkeeping; no signaling is
        replayed for them.
        """
        if isinstance(state, Idle):
            return
        call_id = f"preset-{self.number}-{len(self.legs)}"
        if isinstance(state, Dialing):
            invite = SipMessage.request(
                SipMethod.INVITE, self.number, state.target, call_id
            )
            leg = _LineLeg(call_id, state.target, LegRole.CALLER, LegPhase.EARLY, invite)
        elif isinstance(state, Connected):
            invite = SipMessage.request(
                SipMethod.INVITE, self.number, state.peer, call_id
            )
            leg = _LineLeg(call_id, state.peer, LegRole.CALLER, LegPhase.ANSWERED, invite)
        elif isinstance(state, Held):
            invite = SipMessage.request(
                SipMethod.INVITE, self.number, state.peer, call_id
            )
            leg = _LineLeg(call_id, state.peer, LegRole.CALLER, LegPhase.HELD, invite)
        else:
            raise ValueError(f"cannot preset state {state!r}")
        self.legs[call_id] = leg
        self.state = state

    # -- event handlers -----------------------------------------------------

    def handle_message(self, event: SimEvent) -> None:
        msg = event.message
        if msg.is_request:
            self._handle_request(msg)
        else:
            self._handle_response(msg)

    def _handle_request(self, msg: SipMessage) -> None:
        if msg.method is SipMethod.INVITE:
            self._handle_invite(msg)
        elif msg.method is SipMethod.CANCEL:
            self._handle_cancel(msg)
        elif msg.method is SipMethod.BYE:
            self._handle_bye(msg)
        else:
            # ACK and PRACK are absorbed; this profile does not answer them.
            pass

    def _handle_invite(self, invite: SipMessage) -> None:
        state, actions = call_fsm.on_incoming_invite(
            self.state,
            self.profile,
            invite,
            collision_answer_ms=self.net.collision_answer_ms,
        )
        self.state = state
        alerting = any(
            isinstance(a, SendResponse) and a.status.code == 180 for a in actions
        )
        final_locally = any(
            isinstance(a, SendResponse)
            and a.status.code >= 200
            and not a.answered_by_network
            for a in actions
        )
        auto = next((a for a in actions if isinstance(a, AutoAnswer)), None)
        if not final_locally and not any(
            isinstance(a, SendResponse) and a.answered_by_network for a in actions
        ):
            # Leg stays open at this endpoint: ringing, waiting, or a
            # pending collision answer.
            leg = _LineLeg(
                invite.call_id, invite.from_number, LegRole.CALLEE, LegPhase.EARLY, invite
            )
            self.legs[invite.call_id] = leg
            if auto is not None:
                leg.auto_answer_timer = self.net.set_timer(
                    self.owner_id, auto.after_ms, "auto_answer", (invite.call_id,)
                )
        if alerting:
            self.display = invite.from_number
            if self.ring_hook is not None:
                self.ring_hook(invite, self.net.now)
        self._execute(actions, leg=self.legs.get(invite.call_id))

    def _handle_cancel(self, cancel: SipMessage) -> None:
        leg = self.legs.get(cancel.call_id)
        pending = (
            leg.invite
            if leg is not None and leg.role is LegRole.CALLEE and leg.phase is LegPhase.EARLY
            else None
        )
        state, actions = call_fsm.on_cancel(self.state, cancel, pending)
        self.state = state
        if pending is not None and leg is not None:
            if leg.auto_answer_timer is not None:
                self.net.cancel_timer(leg.auto_answer_timer)
            del self.legs[cancel.call_id]
        self._execute(actions, leg=leg)

    def _handle_bye(self, bye: SipMessage) -> None:
        leg = self.legs.get(bye.call_id)
        state, actions = call_fsm.on_bye(self.state, bye, tuple(self.legs.values()))
        matched = any(
            isinstance(a, SendResponse) and a.status.code == 200 for a in actions
        )
        self.state = state
        if matched and bye.call_id in self.legs:
            del self.legs[bye.call_id]
        self._execute(actions, leg=leg)

    def _handle_response(self, msg: SipMessage) -> None:
        leg = self.legs.get(msg.call_id)
        if leg is None or leg.role is not LegRole.CALLER:
            return  # late or out-of-dialog response; nothing to do
        if msg.cseq[1] is not SipMethod.INVITE:
            return  # 200 to our CANCEL, 481, etc.
        if msg.is_final:
            if leg.patience_timer is not None:
                self.net.cancel_timer(leg.patience_timer)
                leg.patience_timer = None
            remaining = tuple(l for l in self.legs.values() if l is not leg)
            state, actions = call_fsm.on_response(self.state, msg, remaining)
            self.state = state
            assert msg.status is not None
            if msg.status.code == 200:
                leg.phase = LegPhase.ANSWERED
            else:
                del self.legs[leg.call_id]
            self._execute(actions, leg=leg)
        else:
            state, actions = call_fsm.on_response(self.state, msg, ())
            self.state = state
            self._execute(actions, leg=leg)

    def handle_timer(self, tag: str, data: tuple) -> None:
        if tag == "originate":
            call_id, from_claimed, to = data
            self._start_call(call_id, PhoneNumber(from_claimed), PhoneNumber(to))
        elif tag == "auto_answer":
            (call_id,) = data
            leg = self.legs.get(call_id)
            if leg is None or leg.phase is not LegPhase.EARLY:
                return
            state, actions = call_fsm.on_auto_answer(self.state, leg.invite)
            self.state = state
            leg.phase = LegPhase.ANSWERED
            leg.auto_answer_timer = None
            self._execute(actions, leg=leg)
        elif tag == "patience":
            (call_id,) = data
            leg = self.legs.get(call_id)
            if leg is None or leg.phase is not LegPhase.EARLY:
                return
            # Caller gives up on the unanswered INVITE.
            leg.patience_timer = None
            self.net.send(
                self.owner_id,
                SipMessage(
                    method=SipMethod.CANCEL,
                    from_number=leg.invite.from_number,
                    to_number=leg.invite.to_number,
                    call_id=call_id,
                    cseq=(leg.invite.cseq[0], SipMethod.CANCEL),
                ),
            )

    def _start_call(self, call_id: str, from_claimed: PhoneNumber, to: PhoneNumber) -> None:
        invite = SipMessage.request(SipMethod.INVITE, from_claimed, to, call_id)
        leg = _LineLeg(call_id, to, LegRole.CALLER, LegPhase.EARLY, invite)
        self.legs[call_id] = leg
        if isinstance(self.state, Idle):
            self.state = Dialing(to)
        leg.patience_timer = self.net.set_timer(
            self.owner_id, self.net.invite_patience_ms, "patience", (call_id,)
        )
        self.net.send(self.owner_id, invite)

    # -- action execution ----------------------------------------------------

    def _execute(self, actions: list, leg: _LineLeg | None) -> None:
        for action in actions:
            if isinstance(action, SendResponse):
                resp = SipMessage.reply(
                    action.regarding, action.status, pem=action.pem, alert=action.alert
                )
                if action.answered_by_network:
                    self.net.voicemail_answer(self.carrier_id, resp)
                else:
                    self.net.send(self.owner_id, resp)
            elif isinstance(action, SendRequest):
                if leg is None:
                    raise NetsimError("request action without a leg")
                self.net.send(self.owner_id, self._build_request(action.method, leg))
            # StartRingback / NoOp have no wire effect.

    def _build_request(self, method: SipMethod, leg: _LineLeg) -> SipMessage:
        if method in (SipMethod.ACK, SipMethod.CANCEL):
            seq = leg.invite.cseq[0]
        else:
            seq = leg.next_cseq
            leg.next_cseq += 1
        return SipMessage(
            method=method,
            from_number=leg.invite.from_number,
            to_number=leg.invite.to_number,
            call_id=leg.call_id,
            cseq=(seq, method),
        )


class _NetworkCore:
    """Per-carrier core: answers undeliverable or policy-rejected INVITEs."""

    def __init__(self, net: "Federation", carrier_id: str):
        self.net = net
        self.carrier_id = carrier_id
        self.owner_id = f"net:{carrier_id}"

    def handle_message(self, event: SimEvent) -> None:
        msg = event.message
        if msg.is_request and msg.method is SipMethod.INVITE:
            self.net.send(self.owner_id, SipMessage.reply(msg, 480))
        # ACKs to our 480s are absorbed.

    def handle_timer(self, tag: str, data: tuple) -> None:
        pass


class _VoicemailService:
    """Per-carrier voicemail: owns legs it answered for busy subscribers."""

    def __init__(self, net: "Federation", carrier_id: str):
        self.net = net
        self.carrier_id = carrier_id
        self.owner_id = f"vm:{carrier_id}"

    def handle_message(self, event: SimEvent) -> None:
        msg = event.message
        if msg.is_request and msg.method is SipMethod.BYE:
            self.net.send(self.owner_id, SipMessage.reply(msg, 200))
        # ACKs are absorbed; nothing else reaches voicemail.

    def handle_timer(self, tag: str, data: tuple) -> None:
        pass


class Federation:
    """The simulation: carriers, subscribers, router, clock and event queue.

    Single-threaded and fully deterministic for a given (setup, seed).
    Independent Federations share nothing and may run concurrently.
    """

    def __init__(
        self,
        seed: int = 0,
        *,
        collision_answer_ms: int = call_fsm.COLLISION_ANSWER_MS,
        invite_patience_ms: int = DEFAULT_INVITE_PATIENCE_MS,
    ):
        self.seed = seed
        self.rng = random.Random(seed)
        self.collision_answer_ms = collision_answer_ms
        self.invite_patience_ms = invite_patience_ms
        self.now = 0
        self.carriers: dict[str, CarrierNetwork] = {}
        self.owners: dict[str, object] = {}
        self.lines: dict[PhoneNumber, PhoneLine] = {}
        self.trace: list[dict] = []
        self.policy_violations: list[dict] = []
        self._dialogs: dict[str, _Dialog] = {}
        self._heap: list[tuple[int, int, object]] = []
        self._seq = 0
        self._next_timer_id = 0
        self._cancelled_timers: set[int] = set()
        self._call_counter = 0

    # -- setup ----------------------------------------------------------------

    def add_carrier(self, carrier_id: str, policy: GatewayPolicy | None = None) -> CarrierNetwork:
        if carrier_id in self.carriers:
            raise NetsimError(f"carrier {carrier_id} already exists")
        carrier = CarrierNetwork(carrier_id, policy or GatewayPolicy())
        self.carriers[carrier_id] = carrier
        core = _NetworkCore(self, carrier_id)
        vm = _VoicemailService(self, carrier_id)
        self.owners[core.owner_id] = core
        self.owners[vm.owner_id] = vm
        return carrier

    def register_subscriber(
        self, carrier_id: str, number: str, profile: CalleeProfile | None = None
    ) -> PhoneLine:
        """Register a number on a carrier; the number is its authenticated id.

        Numbers are unique across the whole federation (no portability).
        """
        if carrier_id not in self.carriers:
            raise NetsimError(f"no such carrier: {carrier_id}")
        num = PhoneNumber(number)
        if num in self.lines:
            raise DuplicateNumber(f"{num} is already registered")
        if profile is None:
            profile = CalleeProfile(number=num)
        elif profile.number != num:
            raise NetsimError("profile number must match the registered number")
        line = PhoneLine(self, carrier_id, profile)
        self.lines[num] = line
        self.owners[line.owner_id] = line
        return line

    def attach_agent(self, owner_id: str, agent: object) -> None:
        """Attach a non-subscriber event handler (e.g. a verification agent)."""
        self.owners[owner_id] = agent

    def new_call_id(self) -> str:
        self._call_counter += 1
        return f"c{self._call_counter:04d}@sim"

    # -- origination ------------------------------------------------------------

    def originate_call(
        self,
        from_claimed: str,
        originator: PhoneLine,
        to: str,
        at_ms: int | None = None,
    ) -> str:
        """Place a call from ``originator`` with an arbitrary claimed From.

        When the claim differs from the originator's authenticated number
        this is the spoofing launch; whether it gets through is the
        originating carrier's policy decision, made when the INVITE hits
        the edge. An unroutable destination is answered 480 by the core.
        """
        if self.lines.get(originator.number) is not originator:
            raise UnknownSubscriber(f"{originator.number} is not registered here")
        PhoneNumber(from_claimed)
        PhoneNumber(to)
        call_id = self.new_call_id()
        at = self.now if at_ms is None else at_ms
        if at < self.now:
            raise NetsimError("cannot originate in the past")
        self.set_timer(
            originator.owner_id, at - self.now, "originate", (call_id, from_claimed, to)
        )
        return call_id

    # -- routing and transport ----------------------------------------------

    def _carrier_of(self, owner_id: str) -> CarrierNetwork:
        owner = self.owners[owner_id]
        return self.carriers[owner.carrier_id]  # type: ignore[attr-defined]

    def _auth_number(self, owner_id: str) -> PhoneNumber | None:
        kind, _, rest = owner_id.partition(":")
        if kind in ("line", "cive"):
            return PhoneNumber(rest)
        return None

    def _dest_for(self, sender: str, msg: SipMessage) -> str:
        dialog = self._dialogs.get(msg.call_id)
        if msg.is_response:
            if dialog is None:
                raise NetsimError(f"response for unknown dialog {msg.call_id}")
            return dialog.uac if sender == dialog.uas else dialog.uas
        if dialog is not None:
            return dialog.uac if sender == dialog.uas else dialog.uas
        if msg.method is not SipMethod.INVITE:
            # Stray in-dialog request with no dialog state; hand it to the
            # destination line if one exists, else to the core.
            target = self.lines.get(msg.to_number)
            return target.owner_id if target else f"net:{self._carrier_of(sender).id}"
        carrier = self._carrier_of(sender)
        auth = self._auth_number(sender)
        if carrier.policy.enforce_caller_id and auth is not None and msg.from_number != auth:
            self.policy_violations.append(
                {
                    "t_ms": self.now,
                    "carrier": carrier.id,
                    "originator": str(auth),
                    "claimed": str(msg.from_number),
                    "target": str(msg.to_number),
                    "call_id": msg.call_id,
                }
            )
            dest = f"net:{carrier.id}"
        else:
            target = self.lines.get(msg.to_number)
            dest = target.owner_id if target else f"net:{carrier.id}"
        self._dialogs[msg.call_id] = _Dialog(uac=sender, uas=dest)
        return dest

    def _link_delay(self, sender: str, dest: str) -> int:
        src = self._carrier_of(sender)
        dst = self._carrier_of(dest)
        delay = src.policy.link_delay_ms
        if src.policy.jitter_ms:
            delay += self.rng.randint(0, src.policy.jitter_ms)
        if dst.id != src.id:
            # Crossing the interconnect costs the destination carrier's
            # link as well: one gateway hop.
            delay += dst.policy.link_delay_ms
            if dst.policy.jitter_ms:
                delay += self.rng.randint(0, dst.policy.jitter_ms)
        return delay

    def send(self, sender: str, msg: SipMessage) -> None:
        """Emit a message from a hop: log egress, route, schedule delivery."""
        dest = self._dest_for(sender, msg)
        delay = self._link_delay(sender, dest)
        from_hop = _hop_label(sender)
        to_hop = _hop_label(dest)
        self._log_row(self.now, self._carrier_of(sender).id, from_hop, to_hop,
                      Direction.EGRESS, msg)
        self._seq += 1
        event = SimEvent(
            at=self.now + delay,
            seq=self._seq,
            deliver_to=dest,
            message=msg,
            direction=Direction.INGRESS,
            from_hop=from_hop,
            to_hop=to_hop,
        )
        heapq.heappush(self._heap, (event.at, event.seq, event))

    def voicemail_answer(self, carrier_id: str, response: SipMessage) -> None:
        """Answer a forwarded leg from the carrier's voicemail service.

        The voicemail service takes over the answering side of the dialog,
        so the later ACK/BYE land there instead of at the subscriber.
        """
        vm_owner = f"vm:{carrier_id}"
        dialog = self._dialogs.get(response.call_id)
        if dialog is not None:
            dialog.uas = vm_owner
        self.send(vm_owner, response)

    def set_timer(self, owner: str, delay_ms: int, tag: str, data: tuple = ()) -> int:
        self._seq += 1
        self._next_timer_id += 1
        timer = _Timer(
            at=self.now + delay_ms,
            seq=self._seq,
            owner=owner,
            tag=tag,
            data=data,
            timer_id=self._next_timer_id,
        )
        heapq.heappush(self._heap, (timer.at, timer.seq, timer))
        return timer.timer_id

    def cancel_timer(self, timer_id: int) -> None:
        self._cancelled_timers.add(timer_id)

    def _log_row(
        self,
        t_ms: int,
        carrier: str,
        from_hop: str,
        to_hop: str,
        direction: Direction,
        msg: SipMessage,
    ) -> None:
        self.trace.append(
            {
                "t_ms": t_ms,
                "carrier": carrier,
                "from_hop": from_hop,
                "to_hop": to_hop,
                "dir": direction.value,
                "sip": serialize_message(msg),
            }
        )

    # -- event loop ------------------------------------------------------------

    def _discard_dead_timers(self) -> None:
        while self._heap:
            _, _, entry = self._heap[0]
            if isinstance(entry, _Timer) and entry.timer_id in self._cancelled_timers:
                heapq.heappop(self._heap)
                self._cancelled_timers.discard(entry.timer_id)
            else:
                break

    def run(
        self,
        stop_when: Callable[[], bool] | None = None,
        max_sim_ms: int | None = None,
    ) -> int:
        """Process events in deterministic order.

        Stops when the queue drains, when ``stop_when()`` turns true after
        an event, or raises SimBudgetExceeded if live events remain
        scheduled past ``max_sim_ms``.
        """
        while True:
            self._discard_dead_timers()
            if not self._heap:
                return self.now
            at, _, entry = self._heap[0]
            if max_sim_ms is not None and at > max_sim_ms:
                raise SimBudgetExceeded(
                    f"events still queued at t={at} past budget {max_sim_ms}"
                )
            heapq.heappop(self._heap)
            self.now = at
            if isinstance(entry, _Timer):
                self.owners[entry.owner].handle_timer(entry.tag, entry.data)  # type: ignore[attr-defined]
            else:
                assert isinstance(entry, SimEvent)
                self._log_row(
                    entry.at,
                    self._carrier_of(entry.deliver_to).id,
                    entry.from_hop,
                    entry.to_hop,
                    Direction.INGRESS,
                    entry.message,
                )
                self.owners[entry.deliver_to].handle_message(entry)  # type: ignore[attr-defined]
            if stop_when is not None and stop_when():
                return self.now

    def run_until_quiescent(self, max_sim_ms: int = DEFAULT_MAX_SIM_MS) -> int:
        """Drain the event queue; returns the final simulated clock."""
        return self.run(stop_when=None, max_sim_ms=max_sim_ms)

    # -- trace output ------------------------------------------------------------

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(row) + "\n" for row in self.trace)

    def write_trace(self, path: str | Path) -> None:
        Path(path).write_text(self.trace_jsonl(), encoding="utf-8")
