"""SIP wire-format subset for call-setup signaling.

Models just enough of RFC 3261 to carry call setup between simulated
endpoints: five request methods, a closed set of eleven response codes, and
the two headers that leak callee state to the caller side, P-Early-Media
(RFC 5009) and Alert-Info URNs (RFC 7462).

The profile is deliberately narrow. Routing headers (Via, Record-Route,
Route) are never interpreted; the simulator routes by dialog, so they are
carried as opaque extra headers when present. Bodies (e.g. SDP) are opaque
text. Line endings: CRLF and LF are both accepted on parse, LF is emitted
canonically so golden files stay byte-stable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum


class SipCoreError(Exception):
    """Base for everything raised by this module."""


class ParseError(SipCoreError):
    """Base for parse failures."""


class MalformedStartLine(ParseError):
    pass


class UnknownMethod(ParseError):
    pass


class UnknownStatusCode(ParseError):
    pass


class BadHeaderSyntax(ParseError):
    pass


class MissingMandatoryHeader(ParseError):
    pass


_NUMBER_RE = re.compile(r"^\+[0-9]{7,15}$")


class PhoneNumber(str):
    """E.164-style subscriber identity: '+' followed by 7 to 15 digits.

    Equality is exact string equality; no normalization is applied beyond
    construction-time validation.
    """

    def __new__(cls, value: str) -> "PhoneNumber":
        if not _NUMBER_RE.match(value):
            raise ValueError(f"not an E.164-style number: {value!r}")
        return super().__new__(cls, value)

    @property
    def digits(self) -> str:
        return str(self)


class SipMethod(str, Enum):
    INVITE = "INVITE"
    PRACK = "PRACK"
    ACK = "ACK"
    CANCEL = "CANCEL"
    BYE = "BYE"


class PemValue(str, Enum):
    """P-Early-Media direction values (RFC 5009)."""

    SENDRECV = "sendrecv"
    SENDONLY = "sendonly"
    RECVONLY = "recvonly"
    INACTIVE = "inactive"


class AlertUrn(str, Enum):
    """Alert-Info service URN values (RFC 7462).

    An absent Alert-Info header is distinct from ``NORMAL``.
    """

    NORMAL = "normal"
    CALL_WAITING = "call-waiting"
    FORWARD = "forward"
    RECALL_CALLBACK = "recall:callback"
    RECALL_HOLD = "recall:hold"
    RECALL_TRANSFER = "recall:transfer"


class StatusClass(str, Enum):
    PROVISIONAL = "provisional"
    SUCCESS = "success"
    REDIRECT = "redirect"
    CLIENT_FAILURE = "client-failure"


# The only response codes this profile knows. Everything else is rejected at
# parse/construction time so downstream state inference stays total.
CANONICAL_REASON: dict[int, str] = {
    100: "Trying",
    180: "Ringing",
    181: "Call Is Being Forwarded",
    182: "Queued",
    183: "Session Progress",
    200: "OK",
    301: "Moved Permanently",
    480: "Temporarily Unavailable",
    481: "Call/Transaction Does Not Exist",
    486: "Busy Here",
    487: "Request Terminated",
}


@dataclass(frozen=True)
class StatusCode:
    """A response code from the closed set, plus its reason phrase.

    The reason defaults to the canonical RFC 3261 phrase but an odd phrase
    from the wire (e.g. a truncated capture) is preserved as parsed.
    """

    code: int
    reason: str = ""

    def __post_init__(self) -> None:
        if self.code not in CANONICAL_REASON:
            raise UnknownStatusCode(f"status code outside the closed set: {self.code}")
        if not self.reason:
            object.__setattr__(self, "reason", CANONICAL_REASON[self.code])

    def __str__(self) -> str:
        return f"{self.code} {self.reason}"


def classify_status(status: StatusCode | int) -> StatusClass:
    """Map a closed-set status code onto its class.

    Total on exactly the eleven known codes; anything else raises
    ``UnknownStatusCode`` (via StatusCode construction).
    """
    code = status.code if isinstance(status, StatusCode) else StatusCode(status).code
    if 100 <= code < 200:
        return StatusClass.PROVISIONAL
    if code == 200:
        return StatusClass.SUCCESS
    if code == 301:
        return StatusClass.REDIRECT
    return StatusClass.CLIENT_FAILURE


class MessageKind(str, Enum):
    REQUEST = "request"
    RESPONSE = "response"


@dataclass(frozen=True)
class SipMessage:
    """A parsed request or response.

    ``method`` is the request method; for responses it is the transaction
    method echoed in CSeq. ``cseq`` is (sequence, method) and its method
    always equals ``method``. ``pem``/``alert`` hold the recognized
    side-channel headers; anything unrecognized lands in ``extra_headers``
    in original order and survives round-trips untouched.
    """

    method: SipMethod
    from_number: PhoneNumber
    to_number: PhoneNumber
    call_id: str
    cseq: tuple[int, SipMethod]
    status: StatusCode | None = None
    pem: PemValue | None = None
    alert: AlertUrn | None = None
    extra_headers: tuple[tuple[str, str], ...] = ()
    body: str = ""

    def __post_init__(self) -> None:
        if not self.call_id or re.search(r"\s", self.call_id):
            raise ValueError(f"Call-ID must be a nonempty token: {self.call_id!r}")
        seq, cseq_method = self.cseq
        if seq < 1:
            raise ValueError(f"CSeq sequence must be >= 1: {seq}")
        if cseq_method is not self.method:
            raise ValueError(f"CSeq method {cseq_method} does not match {self.method}")

    @property
    def kind(self) -> MessageKind:
        return MessageKind.RESPONSE if self.status is not None else MessageKind.REQUEST

    @property
    def is_request(self) -> bool:
        return self.status is None

    @property
    def is_response(self) -> bool:
        return self.status is not None

    @property
    def is_provisional(self) -> bool:
        return self.status is not None and self.status.code < 200

    @property
    def is_final(self) -> bool:
        return self.status is not None and self.status.code >= 200

    @classmethod
    def request(
        cls,
        method: SipMethod,
        from_number: str,
        to_number: str,
        call_id: str,
        seq: int = 1,
        *,
        pem: PemValue | None = None,
        alert: AlertUrn | None = None,
        extra_headers: tuple[tuple[str, str], ...] = (),
        body: str = "",
    ) -> "SipMessage":
        return cls(
            method=method,
            from_number=PhoneNumber(from_number),
            to_number=PhoneNumber(to_number),
            call_id=call_id,
            cseq=(seq, method),
            pem=pem,
            alert=alert,
            extra_headers=extra_headers,
            body=body,
        )

    @classmethod
    def reply(
        cls,
        to: "SipMessage",
        status: StatusCode | int,
        *,
        pem: PemValue | None = None,
        alert: AlertUrn | None = None,
        extra_headers: tuple[tuple[str, str], ...] = (),
        body: str = "",
    ) -> "SipMessage":
        """Build a response to a request, echoing its identity headers.

        From, To, Call-ID and CSeq are copied verbatim from the request,
        per RFC 3261 section 8.2.6.2.
        """
        if not to.is_request:
            raise ValueError("can only reply to a request")
        return cls(
            method=to.method,
            from_number=to.from_number,
            to_number=to.to_number,
            call_id=to.call_id,
            cseq=to.cseq,
            status=status if isinstance(status, StatusCode) else StatusCode(status),
            pem=pem,
            alert=alert,
            extra_headers=extra_headers,
            body=body,
        )


# Accepted address shapes: "+15551234", "sip:+15551234", "<sip:+1@host;p=1>;tag=x".
# Display names and non-numeric users are out of profile.
_ADDRESS_RE = re.compile(
    r"^<?(?:sip:)?(\+[0-9]+)(?:@[^;>\s]+)?(?:;[^>]*)?>?(?:;.*)?$"
)
_CSEQ_RE = re.compile(r"^([0-9]+)\s+(\S+)$")
_ALERT_RE = re.compile(r"^<urn:alert:service:([a-z:\-]+)>$")

_RECOGNIZED = {"from", "to", "call-id", "cseq", "p-early-media", "alert-info"}

_ALERT_BY_VALUE = {a.value: a for a in AlertUrn}
_PEM_BY_VALUE = {p.value: p for p in PemValue}
_METHOD_BY_VALUE = {m.value: m for m in SipMethod}


def _parse_number(value: str, where: str) -> PhoneNumber:
    m = _ADDRESS_RE.match(value.strip())
    if not m:
        raise BadHeaderSyntax(f"{where}: cannot extract a number from {value!r}")
    try:
        return PhoneNumber(m.group(1))
    except ValueError as exc:
        raise BadHeaderSyntax(f"{where}: {exc}") from exc


def _parse_start_line(line: str) -> tuple[SipMethod | None, StatusCode | None]:
    """Returns (method, None) for requests, (None, status) for responses."""
    parts = line.split(" ", 2)
    if line.startswith("SIP/"):
        if parts[0] != "SIP/2.0" or len(parts) < 2:
            raise MalformedStartLine(f"bad status line: {line!r}")
        try:
            code = int(parts[1])
        except ValueError as exc:
            raise MalformedStartLine(f"non-integer status code in {line!r}") from exc
        reason = parts[2] if len(parts) == 3 else ""
        return None, StatusCode(code, reason)
    if len(parts) != 3 or parts[2] != "SIP/2.0":
        raise MalformedStartLine(f"bad request line: {line!r}")
    method = _METHOD_BY_VALUE.get(parts[0])
    if method is None:
        raise UnknownMethod(f"method outside the closed set: {parts[0]!r}")
    if not _ADDRESS_RE.match(parts[1]):
        raise MalformedStartLine(f"bad request URI: {parts[1]!r}")
    return method, None


def parse_message(text: str) -> SipMessage:
    """Parse one complete SIP message.

    Expects a start line, ``Name: value`` header lines, a blank line, then
    an optional opaque body. Raises a ParseError subclass when the message
    falls outside the profile: MalformedStartLine, UnknownMethod,
    UnknownStatusCode, BadHeaderSyntax, or MissingMandatoryHeader.
    """
    normalized = text.replace("\r\n", "\n")
    head, sep, body = normalized.partition("\n\n")
    lines = head.split("\n")
    if not lines or not lines[0].strip():
        raise MalformedStartLine("empty message")

    method, status = _parse_start_line(lines[0].strip())

    from_number: PhoneNumber | None = None
    to_number: PhoneNumber | None = None
    call_id: str | None = None
    cseq: tuple[int, SipMethod] | None = None
    pem: PemValue | None = None
    alert: AlertUrn | None = None
    extras: list[tuple[str, str]] = []
    seen: set[str] = set()

    for raw in lines[1:]:
        if not raw.strip():
            continue
        if raw[0] in (" ", "\t"):
            # Header folding is outside the profile; reject rather than guess.
            raise BadHeaderSyntax(f"folded header line not supported: {raw!r}")
        name, colon, value = raw.partition(":")
        if not colon or not name.strip():
            raise BadHeaderSyntax(f"not a header line: {raw!r}")
        name = name.strip()
        value = value.strip()
        lname = name.lower()
        if lname in _RECOGNIZED:
            if lname in seen:
                raise BadHeaderSyntax(f"duplicate {name} header")
            seen.add(lname)
        if lname == "from":
            from_number = _parse_number(value, "From")
        elif lname == "to":
            to_number = _parse_number(value, "To")
        elif lname == "call-id":
            if not value or re.search(r"\s", value):
                raise BadHeaderSyntax(f"Call-ID must be a token: {value!r}")
            call_id = value
        elif lname == "cseq":
            m = _CSEQ_RE.match(value)
            if not m:
                raise BadHeaderSyntax(f"bad CSeq: {value!r}")
            seq = int(m.group(1))
            cseq_method = _METHOD_BY_VALUE.get(m.group(2))
            if cseq_method is None:
                raise BadHeaderSyntax(f"CSeq method outside the closed set: {value!r}")
            if seq < 1:
                raise BadHeaderSyntax(f"CSeq sequence must be >= 1: {value!r}")
            cseq = (seq, cseq_method)
        elif lname == "p-early-media":
            pem = _PEM_BY_VALUE.get(value)
            if pem is None:
                raise BadHeaderSyntax(f"bad P-Early-Media value: {value!r}")
        elif lname == "alert-info":
            m = _ALERT_RE.match(value)
            alert = _ALERT_BY_VALUE.get(m.group(1)) if m else None
            if alert is None:
                raise BadHeaderSyntax(f"bad Alert-Info value: {value!r}")
        else:
            extras.append((name, value))

    missing = [
        h
        for h, v in (
            ("From", from_number),
            ("To", to_number),
            ("Call-ID", call_id),
            ("CSeq", cseq),
        )
        if v is None
    ]
    if missing:
        raise MissingMandatoryHeader(f"missing: {', '.join(missing)}")
    assert from_number and to_number and call_id and cseq

    if status is None:
        # For a request the CSeq method must repeat the request method
        # (CANCEL and ACK reuse the INVITE sequence number, not its method).
        if cseq[1] is not method:
            raise BadHeaderSyntax(
                f"CSeq method {cseq[1].value} does not match request method {method.value}"
            )
        msg_method = method
    else:
        msg_method = cseq[1]

    return SipMessage(
        method=msg_method,
        from_number=from_number,
        to_number=to_number,
        call_id=call_id,
        cseq=cseq,
        status=status,
        pem=pem,
        alert=alert,
        extra_headers=tuple(extras),
        body=body if sep else "",
    )


def serialize_message(msg: SipMessage) -> str:
    """Emit the canonical text form of a message.

    Fixed header order: From, To, Call-ID, CSeq, then P-Early-Media and
    Alert-Info when present, then extra headers in stored order, a blank
    line, then the body verbatim. ``parse_message(serialize_message(m))``
    returns a message equal to ``m``.
    """
    if msg.is_request:
        start = f"{msg.method.value} sip:{msg.to_number} SIP/2.0"
    else:
        assert msg.status is not None
        start = f"SIP/2.0 {msg.status.code} {msg.status.reason}"
    lines = [
        start,
        f"From: sip:{msg.from_number}",
        f"To: sip:{msg.to_number}",
        f"Call-ID: {msg.call_id}",
        f"CSeq: {msg.cseq[0]} {msg.cseq[1].value}",
    ]
    if msg.pem is not None:
        lines.append(f"P-Early-Media: {msg.pem.value}")
    if msg.alert is not None:
        lines.append(f"Alert-Info: <urn:alert:service:{msg.alert.value}>")
    for name, value in msg.extra_headers:
        lines.append(f"{name}: {value}")
    return "\n".join(lines) + "\n\n" + msg.body
