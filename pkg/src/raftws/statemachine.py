"""Replicated state machines.

A state machine receives committed log entries in index order and reports
``(success, result)`` for each. :class:`KvStateMachine` is the key-value
machine used by the benchmarks: ``PUT key value`` and ``DEL key``.
"""

from __future__ import annotations

import abc
import hashlib
import json
import os
from typing import Iterable, Optional

PUT = "PUT"
DEL = "DEL"
NOOP = "NOOP"

MAX_FIELD_BYTES = 64 * 1024


class StateMachineError(RuntimeError):
    pass


class StateMachine(abc.ABC):
    """Initialised on construction, fed entries by ``insert``, released by ``terminate``."""

    def __init__(self) -> None:
        self._terminated = False

    @abc.abstractmethod
    def _apply(self, entry) -> tuple[bool, str]: ...

    def insert(self, entry) -> tuple[bool, str]:
        if self._terminated:
            raise StateMachineError("state machine has been terminated")
        return self._apply(entry)

    def terminate(self) -> None:
        if self._terminated:
            raise StateMachineError("state machine already terminated")
        self._terminated = True

    @property
    def terminated(self) -> bool:
        return self._terminated


class KvStateMachine(StateMachine):
    def __init__(self, journal: Optional[str | os.PathLike] = None) -> None:
        super().__init__()
        self.entries: dict[str, str] = {}
        self.applied_uids: dict[str, tuple[str, bool]] = {}
        self._journal = open(journal, "a", encoding="utf-8", newline="") if journal else None

    def _dispatch(self, command: str, params: list[str]) -> tuple[bool, str]:
        if any(len(p.encode("utf-8")) > MAX_FIELD_BYTES for p in params):
            return False, "TOO_LARGE"
        if command == PUT:
            if len(params) != 2:
                return False, "BAD_ARITY"
            self.entries[params[0]] = params[1]
            return True, "OK"
        if command == DEL:
            if len(params) != 1:
                return False, "BAD_ARITY"
            if params[0] not in self.entries:
                return False, "NOT_FOUND"
            del self.entries[params[0]]
            return True, "OK"
        if command == NOOP:
            return True, ""
        return False, "BAD_COMMAND"

    def _apply(self, entry) -> tuple[bool, str]:
        prior = self.applied_uids.get(entry.uid)
        if prior is not None:
            result, success = prior
            return success, result
        success, result = self._dispatch(entry.command, list(entry.parameters))
        self.applied_uids[entry.uid] = (result, success)
        if self._journal is not None:
            self._journal.write(journal_line(entry) + "\n")
            self._journal.flush()
        return success, result

    def terminate(self) -> None:
        super().terminate()
        if self._journal is not None:
            self._journal.close()

    def snapshot(self) -> bytes:
        """Canonical bytes of the full machine state, for equality checks."""
        return json.dumps(
            {"entries": self.entries,
             "appliedUids": {u: [r, s] for u, (r, s) in self.applied_uids.items()}},
            sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        ).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.snapshot()).hexdigest()


def replay(entries: Iterable, machine: Optional[StateMachine] = None) -> StateMachine:
    """Apply ``entries`` in order to a fresh (or the given) machine."""
    sm = machine if machine is not None else KvStateMachine()
    for e in entries:
        sm.insert(e)
    return sm


# journal lines: index|term|uid|command|<JSON list of parameters>


def _esc(text: str) -> str:
    return text.replace("%", "%25").replace("|", "%7C").replace("\n", "%0A")


def _unesc(text: str) -> str:
    return text.replace("%0A", "\n").replace("%7C", "|").replace("%25", "%")


def journal_line(entry) -> str:
    params = json.dumps(list(entry.parameters), ensure_ascii=False, separators=(",", ":"))
    return f"{entry.index}|{entry.term}|{_esc(entry.uid)}|{_esc(entry.command)}|{params}"


def parse_journal_line(line: str):
    from raftws.wire import Entry

    index, term, uid, command, params = line.rstrip("\n").split("|", 4)
    return Entry(int(index), int(term), _unesc(uid), _unesc(command), json.loads(params))


def read_journal(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return [parse_journal_line(line) for line in text.split("\n") if line]
