import random
from pathlib import Path

import pytest

from cive_sim.sip_core import (
    AlertUrn,
    CANONICAL_REASON,
    PemValue,
    SipMessage,
    SipMethod,
)

REPO = Path(__file__).resolve().parents[1]
SCENARIOS = REPO / "scenarios"
CORPUS = REPO / "corpus" / "sip"


@pytest.fixture(scope="session")
def corpus_files() -> list[Path]:
    files = sorted(CORPUS.glob("*.sip"))
    assert files, f"no corpus files under {CORPUS}"
    return files


def random_valid_message(rng: random.Random) -> SipMessage:
    """Generate one valid message from scratch; the generator itself is the
    round-trip oracle (the object is built first, independent of the parser)."""
    number = lambda: "+" + "".join(rng.choice("0123456789") for _ in range(rng.randint(7, 15)))
    method = rng.choice(list(SipMethod))
    seq = rng.randint(1, 99)
    call_id = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz0123456789.-@") for _ in range(rng.randint(1, 24)))
    pem = rng.choice([None, *PemValue])
    alert = rng.choice([None, *AlertUrn])
    extras = tuple(
        (
            f"X-{rng.choice('ABCDEF')}{rng.choice('ab')}-{i}",
            "".join(rng.choice("abcdef0123456789=;,<>*+ ") for _ in range(rng.randint(1, 30))).strip() or "v",
        )
        for i in range(rng.randint(0, 4))
    )
    body = ""
    if rng.random() < 0.4:
        lines = [
            "".join(rng.choice("abcdef ") for _ in range(rng.randint(0, 20)))
            for _ in range(rng.randint(1, 5))
        ]
        body = "\n".join(lines)
    kwargs = dict(pem=pem, alert=alert, extra_headers=extras, body=body)
    if rng.random() < 0.5:
        return SipMessage.request(method, number(), number(), call_id, seq, **kwargs)
    req = SipMessage.request(method, number(), number(), call_id, seq)
    code = rng.choice(list(CANONICAL_REASON))
    return SipMessage.reply(req, code, **kwargs)
