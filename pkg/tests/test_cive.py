import pytest

from cive_sim.call_fsm import CalleeProfile, CallPhase, Connected, Dialing
from cive_sim.cive import (
    Decision,
    EmptyTrace,
    FeatureVector,
    IncomingCallContext,
    InferredState,
    LineBusy,
    SignalingTrace,
    TraceDirection,
    UnsupportedPhase,
    Verdict,
    decide,
    extract_features,
    infer_state,
    launch_verification,
    legs_from_trace_rows,
    verify_incoming,
)
from cive_sim.netsim import Federation
from cive_sim.sip_core import (
    AlertUrn,
    PemValue,
    PhoneNumber,
    SipMessage,
    SipMethod,
    StatusCode,
)

A = PhoneNumber("+15550100")
B = PhoneNumber("+15550101")

INVITE = SipMessage.request(SipMethod.INVITE, B, A, "au-1")


def ctx(phase=CallPhase.RINGING):
    return IncomingCallContext(
        claimed_id=A, callee=B, in_call_id="in-1", phase=phase, t_start=50
    )


def trace_of(*steps, timed_out=False):
    trace = SignalingTrace(timed_out=timed_out)
    t = 0
    for direction, msg in steps:
        trace.append(t, direction, msg)
        t += 50
    return trace


def sent(msg):
    return (TraceDirection.SENT, msg)


def recv(msg):
    return (TraceDirection.RECEIVED, msg)


def reply(code, *, pem=None, alert=None, to=INVITE):
    return SipMessage.reply(to, code, pem=pem, alert=alert)


def req(method, seq):
    return SipMessage(
        method=method, from_number=B, to_number=A, call_id="au-1", cseq=(seq, method)
    )


def test_extract_features_connected_shape():
    cancel = req(SipMethod.CANCEL, 1)
    trace = trace_of(
        sent(INVITE),
        recv(reply(100)),
        recv(reply(183, pem=PemValue.SENDRECV)),
        sent(req(SipMethod.PRACK, 2)),
        recv(reply(180, pem=PemValue.SENDRECV, alert=AlertUrn.CALL_WAITING)),
        sent(cancel),
        recv(reply(200, to=cancel)),
        recv(reply(487)),
        sent(req(SipMethod.ACK, 1)),
    )
    f = extract_features(trace)
    assert f.pem_180 is PemValue.SENDRECV
    assert f.alert_180 is AlertUrn.CALL_WAITING
    assert f.final_to_invite == StatusCode(487)
    assert f.teardown is SipMethod.CANCEL
    assert not f.saw_181 and not f.saw_486 and not f.timed_out


def test_extract_features_collision_shape():
    trace = trace_of(
        sent(INVITE),
        recv(reply(100)),
        recv(reply(183, pem=PemValue.SENDONLY)),
        sent(req(SipMethod.PRACK, 2)),
        recv(reply(180, pem=PemValue.SENDONLY)),
        recv(reply(200)),
        sent(req(SipMethod.ACK, 1)),
        sent(req(SipMethod.BYE, 3)),
        recv(reply(200, to=req(SipMethod.BYE, 3))),
    )
    f = extract_features(trace)
    assert f.pem_180 is PemValue.SENDONLY
    assert f.final_to_invite == StatusCode(200)
    assert f.teardown is SipMethod.BYE


def test_extract_features_uses_first_180_and_invite_final_only():
    cancel = req(SipMethod.CANCEL, 1)
    trace = trace_of(
        sent(INVITE),
        recv(reply(180, pem=PemValue.SENDONLY)),
        recv(reply(180, pem=PemValue.SENDRECV)),  # later 180 ignored
        sent(cancel),
        recv(reply(200, to=cancel)),  # 200 on the CANCEL tx is not the final
        recv(reply(487)),
        sent(req(SipMethod.ACK, 1)),
    )
    f = extract_features(trace)
    assert f.pem_180 is PemValue.SENDONLY
    assert f.final_to_invite == StatusCode(487)


def test_extract_features_degenerate_and_empty():
    f = extract_features(trace_of(sent(INVITE), timed_out=True))
    assert f == FeatureVector(timed_out=True)
    with pytest.raises(EmptyTrace):
        extract_features(SignalingTrace())


def test_trace_invariants():
    trace = SignalingTrace()
    with pytest.raises(ValueError):
        trace.append(0, TraceDirection.RECEIVED, reply(100))
    trace.append(10, TraceDirection.SENT, INVITE)
    with pytest.raises(ValueError):
        trace.append(5, TraceDirection.RECEIVED, reply(100))


INFERENCE_TABLE = [
    (FeatureVector(pem_180=PemValue.SENDONLY), InferredState.DIALING),
    (
        FeatureVector(pem_180=PemValue.SENDRECV, alert_180=AlertUrn.CALL_WAITING),
        InferredState.CONNECTED,
    ),
    (FeatureVector(pem_180=PemValue.SENDRECV), InferredState.IDLE),
    (FeatureVector(saw_486=True), InferredState.BUSY_NO_WAITING),
    (FeatureVector(saw_181=True), InferredState.FORWARDED_TO_VOICEMAIL),
    (FeatureVector(timed_out=True), InferredState.UNREACHABLE),
    (FeatureVector(), InferredState.UNREACHABLE),  # nothing seen at all
    (
        FeatureVector(final_to_invite=StatusCode(480)),
        InferredState.UNREACHABLE,
    ),
    # 486 wins over everything, even a sendonly 180 seen earlier.
    (FeatureVector(pem_180=PemValue.SENDONLY, saw_486=True), InferredState.BUSY_NO_WAITING),
    (FeatureVector(pem_180=PemValue.SENDRECV, saw_181=True), InferredState.FORWARDED_TO_VOICEMAIL),
    # A 180 without early media but with an alert matches no rule.
    (FeatureVector(alert_180=AlertUrn.CALL_WAITING), InferredState.UNKNOWN),
    (
        FeatureVector(pem_180=PemValue.RECVONLY, final_to_invite=StatusCode(487)),
        InferredState.UNKNOWN,
    ),
]


@pytest.mark.parametrize("features,expected", INFERENCE_TABLE)
def test_inference_table(features, expected):
    assert infer_state(features) is expected


def test_inference_pure():
    f = FeatureVector(pem_180=PemValue.SENDRECV)
    assert infer_state(f) is infer_state(f)
    assert extract_features(trace_of(sent(INVITE))) == extract_features(trace_of(sent(INVITE)))


DECISION_TABLE = [
    (InferredState.DIALING, Decision.LEGIT),
    (InferredState.IDLE, Decision.SPOOFED),
    (InferredState.CONNECTED, Decision.SPOOFED),
    (InferredState.BUSY_NO_WAITING, Decision.SPOOFED),
    (InferredState.FORWARDED_TO_VOICEMAIL, Decision.SPOOFED),
    (InferredState.UNREACHABLE, Decision.INCONCLUSIVE),
    (InferredState.UNKNOWN, Decision.INCONCLUSIVE),
]


@pytest.mark.parametrize("inferred,expected", DECISION_TABLE)
def test_decision_table(inferred, expected):
    features = FeatureVector()
    verdict = decide(ctx(), inferred, features)
    assert verdict.decision is expected
    assert verdict.inferred is inferred
    assert "dialing toward" in verdict.expected
    assert verdict.reason.startswith("rule ")


def test_decide_rejects_answered_phase():
    with pytest.raises(UnsupportedPhase):
        decide(ctx(CallPhase.ANSWERED), InferredState.DIALING, FeatureVector())


def test_verdict_invariants():
    with pytest.raises(ValueError):
        Verdict(Decision.LEGIT, InferredState.IDLE, "x", "r", FeatureVector())
    with pytest.raises(ValueError):
        Verdict(Decision.SPOOFED, InferredState.DIALING, "x", "r", FeatureVector())
    with pytest.raises(ValueError):
        Verdict(Decision.SPOOFED, InferredState.UNKNOWN, "x", "r", FeatureVector())


def _federation(**profile_kwargs):
    net = Federation()
    net.add_carrier("cn-a")
    net.register_subscriber("cn-a", A, CalleeProfile(A, **profile_kwargs))
    net.register_subscriber("cn-a", B)
    return net


def test_launch_rejects_answered_phase():
    net = _federation()
    with pytest.raises(UnsupportedPhase):
        launch_verification(net, ctx(CallPhase.ANSWERED))


def test_launch_line_busy_while_in_flight():
    net = _federation()

    class Stuck:
        done = False

    net.attach_agent(f"cive:{B}", Stuck())
    with pytest.raises(LineBusy):
        launch_verification(net, ctx())


def test_verify_idle_target_infers_idle():
    net = _federation()
    verdict, trace = verify_incoming(net, ctx())
    assert verdict.decision is Decision.SPOOFED
    assert verdict.inferred is InferredState.IDLE
    assert trace.entries[0].message.method is SipMethod.INVITE
    assert not trace.timed_out


def test_verify_unroutable_claimed_is_inconclusive():
    net = Federation()
    net.add_carrier("cn-a")
    net.register_subscriber("cn-a", B)
    unknown = PhoneNumber("+19990001111")
    context = IncomingCallContext(
        claimed_id=unknown, callee=B, in_call_id="in-1",
        phase=CallPhase.RINGING, t_start=0,
    )
    verdict, trace = verify_incoming(net, context)
    kinds = [
        e.message.method.value if e.message.is_request else e.message.status.code
        for e in trace
    ]
    assert kinds == ["INVITE", 480, "ACK"]
    assert not trace.timed_out
    assert verdict.inferred is InferredState.UNREACHABLE
    assert verdict.decision is Decision.INCONCLUSIVE


def test_verify_connected_no_features_is_busy():
    net = _federation()
    net.register_subscriber("cn-a", "+15550102")
    net.lines[A].preset_state(Connected(PhoneNumber("+15550102")))
    verdict, trace = verify_incoming(net, ctx())
    assert verdict.inferred is InferredState.BUSY_NO_WAITING
    assert verdict.decision is Decision.SPOOFED
    f = verdict.features
    assert f.saw_486 and f.final_to_invite == StatusCode(486)
    assert f.teardown is None  # a 486 final needs only the ACK


def test_verify_voicemail_forward_detected():
    net = _federation(voicemail_forward=True)
    net.register_subscriber("cn-a", "+15550102")
    net.lines[A].preset_state(Connected(PhoneNumber("+15550102")))
    verdict, trace = verify_incoming(net, ctx())
    assert verdict.inferred is InferredState.FORWARDED_TO_VOICEMAIL
    assert verdict.features.saw_181
    assert verdict.features.teardown is SipMethod.BYE
    # the voicemail leg is answered and released cleanly
    kinds = [
        e.message.method.value if e.message.is_request else e.message.status.code
        for e in trace
    ]
    assert kinds == ["INVITE", 100, 181, 200, "ACK", "BYE", 200]


def test_launch_traces_are_transaction_legal():
    # Received response codes on the INVITE transaction follow
    # 100, optional 183, any 180s, then exactly one final
    # (200 | 486 | 487 | 181-then-200), across every callee condition.
    import re

    pattern = re.compile(r"^100(,183)?(,180)*(,(200|486|487)|,181,200)$")
    variants = []
    for kwargs, preset in (
        ({}, None),
        ({}, Dialing(B)),  # the call-back collision, answered with 200
        ({"call_waiting": True}, Connected(PhoneNumber("+15550102"))),
        ({"voicemail_forward": True}, Connected(PhoneNumber("+15550102"))),
        ({}, Connected(PhoneNumber("+15550102"))),
    ):
        net = _federation(**kwargs)
        net.register_subscriber("cn-a", "+15550102")
        if preset is not None:
            net.lines[A].preset_state(preset)
        variants.append(launch_verification(net, ctx()))
    for trace in variants:
        codes = [
            e.message.status.code
            for e in trace
            if e.direction is TraceDirection.RECEIVED
            and e.message.is_response
            and e.message.cseq[1] is SipMethod.INVITE
        ]
        assert pattern.match(",".join(map(str, codes))), codes


def test_legs_from_trace_rows_round_trip():
    net = _federation()
    verdict, trace = verify_incoming(net, ctx())
    net.run_until_quiescent()
    import json

    rows = [json.loads(line) for line in net.trace_jsonl().splitlines()]
    legs = legs_from_trace_rows(rows)
    au = [t for cid, obs, t in legs if obs == f"ep:{B}"]
    assert len(au) == 1
    rebuilt = extract_features(au[0])
    assert rebuilt == verdict.features
