"""
Reading and writing MDP definition files.

Grammar (one statement per line, `#` starts a comment, blank lines are ignored):

    states <n_states>
    actions <n_actions>
    terminal <s> [<s> ...]          optional, may repeat
    <s> <a> <s'> <probability> <reward>

`states` and `actions` must appear before the first transition line. Every transition line
adds one outcome to the (s, a) row; rows are not required to be complete here, completeness
and probability sums are checked by `validate_mdp`. A terminal state without transition lines
gets a zero-reward self-loop for every action.
"""
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple, Union

from rpbt.model import DomainError, Outcome, TabularMDP


class MdpFormatError(DomainError):
    """Raised when an MDP definition file does not follow the grammar."""

    def __init__(self, message: str, lineno: int) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def parse_mdp(text: str) -> TabularMDP:
    n_states: Optional[int] = None
    n_actions: Optional[int] = None
    terminal: Set[int] = set()
    rows: Dict[Tuple[int, int], List[Outcome]] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "states" or head == "actions":
            if len(rest) != 1:
                raise MdpFormatError(f"`{head}` takes exactly one integer", lineno)
            value = _int(rest[0], lineno)
            if value < 1:
                raise MdpFormatError(f"`{head}` must be positive", lineno)
            if head == "states":
                n_states = value
            else:
                n_actions = value
            continue
        if head == "terminal":
            if not rest:
                raise MdpFormatError("`terminal` needs at least one state", lineno)
            terminal.update(_int(token, lineno) for token in rest)
            continue
        if n_states is None or n_actions is None:
            raise MdpFormatError("`states` and `actions` must precede transitions", lineno)
        if len(rest) != 4:
            raise MdpFormatError("transition lines have five fields: s a s' p r", lineno)
        s, a, nxt = _int(head, lineno), _int(rest[0], lineno), _int(rest[1], lineno)
        p, r = _float(rest[2], lineno), _float(rest[3], lineno)
        if not (0 <= s < n_states and 0 <= nxt < n_states and 0 <= a < n_actions):
            raise MdpFormatError(f"index out of range in ({s}, {a}, {nxt})", lineno)
        rows.setdefault((s, a), []).append((nxt, p, r))

    if n_states is None or n_actions is None:
        raise MdpFormatError("missing `states` or `actions` header", 0)
    bad = sorted(t for t in terminal if not 0 <= t < n_states)
    if bad:
        raise MdpFormatError(f"terminal state {bad[0]} out of range", 0)
    for s in sorted(terminal):
        for a in range(n_actions):
            rows.setdefault((s, a), [(s, 1.0, 0.0)])
    return TabularMDP(
        n_states=n_states,
        n_actions=n_actions,
        transitions={key: tuple(outs) for key, outs in rows.items()},
        terminal=tuple(s in terminal for s in range(n_states)),
    )


def format_mdp(mdp: TabularMDP) -> str:
    lines = [f"states {mdp.n_states}", f"actions {mdp.n_actions}"]
    terminal = [str(s) for s, flag in enumerate(mdp.terminal) if flag]
    if terminal:
        lines.append("terminal " + " ".join(terminal))
    lines.append("# s a s' p r")
    for (s, a), outs in sorted(mdp.transitions.items()):
        for nxt, p, r in outs:
            lines.append(f"{s} {a} {nxt} {p!r} {r!r}")
    return "\n".join(lines) + "\n"


def load_mdp(path: Union[str, Path]) -> TabularMDP:
    return parse_mdp(Path(path).read_text(encoding="utf-8"))


def _int(token: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise MdpFormatError(f"expected an integer, got {token!r}", lineno) from None


def _float(token: str, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise MdpFormatError(f"expected a number, got {token!r}", lineno) from None
