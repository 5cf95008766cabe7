"""Wire protocol for the serve mode: versioned line-delimited JSON text messages.

One message per line/frame. Floats are emitted with at most six decimal
digits, which fixes the bit-exactness contract of every numeric field:
encode/decode round-trips are identities for values already on that grid.
"""
from __future__ import annotations

import json

from .exceptions import ProtocolError

PROTOCOL_VERSION = 1
SUPPORTED_VERSIONS = (1,)

VARIANTS = ("baseline", "feedforward", "feedback")
ROLES = ("operator", "observer")

# required fields and their shallow validators per message type
_NUMBER = (int, float)


def _is_vector(v):
    return isinstance(v, list) and all(isinstance(x, _NUMBER) for x in v)


_CLIENT_SCHEMAS = {
    "hello": {"role": lambda v: v in ROLES, "version": lambda v: isinstance(v, int)},
    "device_pose": {"x_h": _is_vector, "v_h": _is_vector},
    "clutch": {"engaged": lambda v: isinstance(v, bool)},
    "set_variant": {"variant": lambda v: v in VARIANTS},
    "set_delay": {"delay": lambda v: isinstance(v, dict)},
    "pause": {},
    "resume": {},
    "reset": {},
}

_SERVER_SCHEMAS = {
    "hello_ok": {"version": lambda v: isinstance(v, int), "scene": lambda v: isinstance(v, dict),
                 "role": lambda v: v in ROLES},
    "telemetry": {"t": lambda v: isinstance(v, _NUMBER), "ee": _is_vector,
                  "x_d": _is_vector, "v_d": _is_vector, "q": _is_vector,
                  "f_contact": _is_vector, "f_hf_mag": lambda v: isinstance(v, _NUMBER),
                  "policy_age_ms": lambda v: isinstance(v, _NUMBER),
                  "variant": lambda v: v in VARIANTS,
                  "clutched": lambda v: isinstance(v, bool),
                  "seq": lambda v: isinstance(v, int)},
    "error": {"code": lambda v: isinstance(v, str), "message": lambda v: isinstance(v, str)},
    "notice": {"message": lambda v: isinstance(v, str)},
}

_SCHEMAS = {**_CLIENT_SCHEMAS, **_SERVER_SCHEMAS}


def _round_floats(value):
    if isinstance(value, float):
        return round(value, 6)
    if isinstance(value, list):
        return [_round_floats(v) for v in value]
    if isinstance(value, dict):
        return {k: _round_floats(v) for k, v in value.items()}
    return value


def encode(message: dict) -> str:
    """Serialize a message to one newline-terminated JSON line."""
    if not isinstance(message, dict) or "type" not in message:
        raise ProtocolError("message must be a mapping with a 'type' field")
    if message["type"] not in _SCHEMAS:
        raise ProtocolError(f"unknown message type '{message['type']}'")
    return json.dumps(_round_floats(message), sort_keys=True,
                      separators=(",", ":")) + "\n"


def decode(line: str) -> dict:
    """Parse and validate one message line."""
    try:
        message = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    if not isinstance(message, dict):
        raise ProtocolError("frame must decode to a mapping")
    kind = message.get("type")
    if kind not in _SCHEMAS:
        raise ProtocolError(f"unknown message type '{kind}'")
    for field, check in _SCHEMAS[kind].items():
        if field not in message:
            raise ProtocolError(f"{kind}: missing field '{field}'")
        if not check(message[field]):
            raise ProtocolError(f"{kind}: invalid value for '{field}'")
    return message


def error_frame(code: str, message: str) -> str:
    return encode({"type": "error", "code": code, "message": message})


def notice_frame(message: str) -> str:
    return encode({"type": "notice", "message": message})
