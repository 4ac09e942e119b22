"""Message envelope and the newline-delimited JSON frame format.

Every frame is one compact JSON object terminated by a single ``\\n``::

    {"body":{...},"msgId":"...","msgType":"AppendEntriesReq","sender":"127.0.0.1:7001"}

Keys are sorted and separators are compact, so a message has exactly one
byte encoding. Body field names are the camelCase argument names of the
service operations; Python attributes use the snake_case spelling.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import Any, ClassVar, Optional, Union


class DecodeError(ValueError):
    """A frame could not be turned into a well-formed message."""


def _camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(part[:1].upper() + part[1:] for part in rest)


@dataclass(frozen=True)
class Entry:
    """A log entry as it travels inside AppendEntries."""

    index: int
    term: int
    uid: str
    command: str
    parameters: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- service ops


@dataclass(frozen=True)
class InsertCommandReq:
    msg_type: ClassVar[str] = "InsertCommandReq"
    uid: str
    command: str
    parameters: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class InsertCommandResp:
    msg_type: ClassVar[str] = "InsertCommandResp"
    success: bool
    result: Optional[str] = None
    leader_address: Optional[str] = None


@dataclass(frozen=True)
class AppendEntriesReq:
    msg_type: ClassVar[str] = "AppendEntriesReq"
    term: int
    leader_id: str
    prev_log_index: int
    prev_log_term: int
    entries: list[Entry]
    leader_commit: int


@dataclass(frozen=True)
class AppendEntriesResp:
    msg_type: ClassVar[str] = "AppendEntriesResp"
    term: int
    success: bool


@dataclass(frozen=True)
class RequestVoteReq:
    msg_type: ClassVar[str] = "RequestVoteReq"
    term: int
    candidate_id: str
    last_log_index: int
    last_log_term: int


@dataclass(frozen=True)
class RequestVoteResp:
    msg_type: ClassVar[str] = "RequestVoteResp"
    term: int
    vote_granted: bool


# ------------------------------------------------------------------ discovery


@dataclass(frozen=True)
class Hello:
    msg_type: ClassVar[str] = "Hello"
    endpoint_id: str
    device_type: str
    service_address: str


@dataclass(frozen=True)
class Bye:
    msg_type: ClassVar[str] = "Bye"
    endpoint_id: str


@dataclass(frozen=True)
class Probe:
    msg_type: ClassVar[str] = "Probe"
    device_type: str


@dataclass(frozen=True)
class ProbeMatch:
    msg_type: ClassVar[str] = "ProbeMatch"
    endpoint_id: str
    device_type: str
    service_address: str


@dataclass(frozen=True)
class EndOfWorkload:
    msg_type: ClassVar[str] = "EndOfWorkload"
    client_id: str
    operations: int
    partial: bool = False


# -------------------------------------------------------- manager <-> server


@dataclass(frozen=True)
class ConfigureReq:
    """Role, neighbours and timeout assigned by the experiment manager."""

    msg_type: ClassVar[str] = "ConfigureReq"
    role: str
    term: int
    leader_id: Optional[str]
    peers: list[str]
    election_timeout_ms: int
    heartbeat_mode: str = "safe"


@dataclass(frozen=True)
class StartReq:
    msg_type: ClassVar[str] = "StartReq"


@dataclass(frozen=True)
class StatusReq:
    msg_type: ClassVar[str] = "StatusReq"


@dataclass(frozen=True)
class StatusResp:
    msg_type: ClassVar[str] = "StatusResp"
    role: str
    term: int
    leader_id: Optional[str]
    commit_index: int
    last_applied: int
    last_log_index: int


@dataclass(frozen=True)
class DumpReq:
    msg_type: ClassVar[str] = "DumpReq"


@dataclass(frozen=True)
class DumpResp:
    msg_type: ClassVar[str] = "DumpResp"
    entries: list[Entry]
    commit_index: int
    last_applied: int
    state: dict[str, str]


@dataclass(frozen=True)
class WriteStatsReq:
    msg_type: ClassVar[str] = "WriteStatsReq"
    path: str


@dataclass(frozen=True)
class ShutdownReq:
    msg_type: ClassVar[str] = "ShutdownReq"
    abrupt: bool = False  # exit without Bye, as a crash would


@dataclass(frozen=True)
class Ack:
    msg_type: ClassVar[str] = "Ack"
    ok: bool = True
    reason: Optional[str] = None


Body = Union[
    InsertCommandReq, InsertCommandResp, AppendEntriesReq, AppendEntriesResp,
    RequestVoteReq, RequestVoteResp, Hello, Bye, Probe, ProbeMatch,
    EndOfWorkload, ConfigureReq, StartReq, StatusReq, StatusResp, DumpReq,
    DumpResp, WriteStatsReq, ShutdownReq, Ack,
]

BODY_TYPES: dict[str, type] = {cls.msg_type: cls for cls in typing.get_args(Body)}


@dataclass(frozen=True)
class Message:
    body: Any
    msg_id: str
    sender: str

    @property
    def msg_type(self) -> str:
        return self.body.msg_type


# ------------------------------------------------------------------ encoding


def _to_json(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {_camel(f.name): _to_json(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_to_json(v) for v in value]
    if isinstance(value, dict):
        return {k: _to_json(v) for k, v in value.items()}
    return value


def to_json_obj(msg: Message) -> dict:
    return {
        "msgType": msg.msg_type,
        "msgId": msg.msg_id,
        "sender": msg.sender,
        "body": _to_json(msg.body),
    }


def encode(msg: Message) -> bytes:
    """Serialise ``msg`` to one newline-terminated frame."""
    if type(msg.body).msg_type not in BODY_TYPES:
        raise TypeError(f"not a message body: {msg.body!r}")
    text = json.dumps(to_json_obj(msg), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8") + b"\n"


_HINTS: dict[type, dict[str, Any]] = {}


def _hints(cls: type) -> dict[str, Any]:
    if cls not in _HINTS:
        _HINTS[cls] = typing.get_type_hints(cls)
    return _HINTS[cls]


def _check(value: Any, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if tp is int:
        if type(value) is not int:
            raise DecodeError(f"{where}: expected integer")
        return value
    if tp is bool:
        if type(value) is not bool:
            raise DecodeError(f"{where}: expected boolean")
        return value
    if tp is str:
        if type(value) is not str:
            raise DecodeError(f"{where}: expected string")
        return value
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check(value, args[0], where)
    if origin is list:
        if type(value) is not list:
            raise DecodeError(f"{where}: expected list")
        (item,) = typing.get_args(tp)
        return [_check(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if type(value) is not dict:
            raise DecodeError(f"{where}: expected object")
        _, item = typing.get_args(tp)
        return {k: _check(v, item, f"{where}.{k}") for k, v in value.items()}
    if dataclasses.is_dataclass(tp):
        return _from_json(tp, value, where)
    raise DecodeError(f"{where}: unsupported type {tp!r}")


def _from_json(cls: type, obj: Any, where: str) -> Any:
    if type(obj) is not dict:
        raise DecodeError(f"{where}: expected object")
    hints = _hints(cls)
    fields = dataclasses.fields(cls)
    expected = {_camel(f.name) for f in fields}
    if set(obj) != expected:
        extra = sorted(set(obj) - expected)
        missing = sorted(expected - set(obj))
        raise DecodeError(f"{where}: bad fields (extra={extra}, missing={missing})")
    kwargs = {f.name: _check(obj[_camel(f.name)], hints[f.name], f"{where}.{_camel(f.name)}")
              for f in fields}
    return cls(**kwargs)


def from_json_obj(obj: Any) -> Message:
    if type(obj) is not dict or set(obj) != {"msgType", "msgId", "sender", "body"}:
        raise DecodeError("bad envelope")
    msg_type = obj["msgType"]
    if msg_type not in BODY_TYPES:
        raise DecodeError(f"unknown msgType {msg_type!r}")
    if type(obj["msgId"]) is not str or type(obj["sender"]) is not str:
        raise DecodeError("msgId and sender must be strings")
    body = _from_json(BODY_TYPES[msg_type], obj["body"], msg_type)
    return Message(body=body, msg_id=obj["msgId"], sender=obj["sender"])


def decode(frame: bytes) -> Message:
    """Parse one complete frame; raises :class:`DecodeError` on anything else."""
    if not frame.endswith(b"\n"):
        raise DecodeError("truncated frame (no terminator)")
    payload = frame[:-1]
    if b"\n" in payload:
        raise DecodeError("more than one frame")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"garbled frame: {exc}") from None
    return from_json_obj(obj)


def body_field_names(cls: type) -> list[str]:
    """Wire names of a body class, in declaration order."""
    return [_camel(f.name) for f in dataclasses.fields(cls)]
