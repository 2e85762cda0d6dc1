"""Prefix-tree lattice of first-pass hypotheses.

Arcs carry a token, its first-pass log score and a slot for the second-pass
score. Terminal nodes carry two scalars: ``final_rnnt`` (whatever part of a
hypothesis' first-pass score is not attributed to its arcs, e.g. blank mass
or disagreement between hypotheses sharing a prefix) and ``final_las`` (the
second-pass end-of-sequence score). Path scores are sums over arcs plus
the terminal scalars, so any hypothesis score round-trips exactly.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class RescoreIncompleteError(ValueError):
    """Second-pass scores are missing on every terminal path."""


class LatticeFormatError(ValueError):
    pass


@dataclass
class Arc:
    src: int
    dst: int
    token: int
    rnnt_logp: float
    las_logp: float | None = None


@dataclass
class Terminal:
    final_rnnt: float = 0.0
    final_las: float | None = None


@dataclass(frozen=True)
class ScoreWeights:
    """Interpolation weight between first- and second-pass scores."""

    lambda_las: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lambda_las <= 1.0:
            raise ValueError("lambda_las must lie in [0, 1]")


@dataclass
class PrefixTreeLattice:
    utt_id: str = ""
    vocab_hash: str = ""
    parent: list[int] = field(default_factory=lambda: [-1])
    depth: list[int] = field(default_factory=lambda: [0])
    in_arc: list[int] = field(default_factory=lambda: [-1])
    arcs: list[Arc] = field(default_factory=list)
    children: list[dict] = field(default_factory=lambda: [{}])
    terminals: dict[int, Terminal] = field(default_factory=dict)

    root = 0

    # -- construction -------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.parent)

    def add_arc(self, src: int, token: int, rnnt_logp: float) -> int:
        if token in self.children[src]:
            return self.arcs[self.children[src][token]].dst
        dst = len(self.parent)
        self.parent.append(src)
        self.depth.append(self.depth[src] + 1)
        self.children.append({})
        self.arcs.append(Arc(src, dst, int(token), float(rnnt_logp)))
        self.in_arc.append(len(self.arcs) - 1)
        self.children[src][int(token)] = len(self.arcs) - 1
        return dst

    @classmethod
    def from_beam_hypotheses(cls, hyps: Iterable, utt_id: str = "", vocab_hash: str = "") -> "PrefixTreeLattice":
        """Build from ``(tokens, per_token_logps)`` or ``(tokens, per_token_logps, total)``.

        Shared prefixes share arcs (the first hypothesis to create an arc sets
        its score). Duplicate token sequences are merged, keeping the first.
        """
        lat = cls(utt_id=utt_id, vocab_hash=vocab_hash)
        for hyp in hyps:
            tokens, logps = tuple(hyp[0]), list(hyp[1])
            if len(tokens) != len(logps):
                raise ValueError("each token needs one first-pass log score")
            total = float(hyp[2]) if len(hyp) > 2 else math.fsum(logps)
            node = lat.root
            for tok, lp in zip(tokens, logps):
                node = lat.add_arc(node, tok, lp)
            if node in lat.terminals:
                continue
            path = math.fsum(lat.arcs[a].rnnt_logp for a in lat.path_arcs(node))
            lat.terminals[node] = Terminal(final_rnnt=total - path)
        return lat

    # -- queries ------------------------------------------------------
    def path_arcs(self, node: int) -> list[int]:
        out = []
        while node != self.root:
            a = self.in_arc[node]
            out.append(a)
            node = self.arcs[a].src
        return out[::-1]

    def tokens_to(self, node: int) -> tuple[int, ...]:
        return tuple(self.arcs[a].token for a in self.path_arcs(node))

    def hypotheses(self) -> list[tuple[tuple[int, ...], float]]:
        """All terminal paths with their first-pass totals, in node order."""
        out = []
        for node in sorted(self.terminals):
            arcs = self.path_arcs(node)
            total = math.fsum([self.arcs[a].rnnt_logp for a in arcs] + [self.terminals[node].final_rnnt])
            out.append((self.tokens_to(node), total))
        return out

    def _scored_paths(self, weights: ScoreWeights):
        lam = weights.lambda_las
        out = []
        incomplete = 0
        for node, term in self.terminals.items():
            arcs = [self.arcs[a] for a in self.path_arcs(node)]
            score = (1.0 - lam) * (sum(a.rnnt_logp for a in arcs) + term.final_rnnt)
            if lam > 0:
                if term.final_las is None or any(a.las_logp is None for a in arcs):
                    incomplete += 1
                    continue
                score += lam * (sum(a.las_logp for a in arcs) + term.final_las)
            out.append((score, tuple(a.token for a in arcs)))
        if self.terminals and not out:
            raise RescoreIncompleteError("no terminal path carries second-pass scores")
        out.sort(key=lambda st: (-st[0], st[1]))
        return out

    def nbest(self, n: int, weights: ScoreWeights = ScoreWeights(0.0)) -> list[tuple[tuple[int, ...], float]]:
        if n < 1:
            raise ValueError("n must be >= 1")
        return [(toks, s) for s, toks in self._scored_paths(weights)[:n]]

    def best_path(self, weights: ScoreWeights = ScoreWeights(0.0)) -> tuple[tuple[int, ...], float]:
        ranked = self.nbest(1, weights)
        if not ranked:
            raise ValueError("lattice has no hypotheses")
        return ranked[0]

    def strip_token(self, token: int) -> "PrefixTreeLattice":
        """Remove ``token`` from every path; merged duplicates keep the best first-pass total.

        Removed arcs' scores move into the terminal residual, so totals are preserved.
        """
        best: dict[tuple, tuple] = {}
        for node in sorted(self.terminals):
            arcs = [self.arcs[a] for a in self.path_arcs(node)]
            kept = [(a.token, a.rnnt_logp) for a in arcs if a.token != token]
            total = math.fsum([a.rnnt_logp for a in arcs] + [self.terminals[node].final_rnnt])
            key = tuple(t for t, _ in kept)
            if key not in best or total > best[key][1]:
                best[key] = ([lp for _, lp in kept], total)
        hyps = [(k, v[0], v[1]) for k, v in best.items()]
        hyps.sort(key=lambda h: (-h[2], h[0]))
        return PrefixTreeLattice.from_beam_hypotheses(hyps, self.utt_id, self.vocab_hash)

    # -- serialisation ------------------------------------------------
    def dumps(self) -> str:
        out = io.StringIO()
        out.write("lattice v1\n")
        out.write(f"utt_id {self.utt_id or '-'}\n")
        out.write(f"vocab_hash {self.vocab_hash or '-'}\n")
        out.write(f"nodes {self.num_nodes}\n")
        for i in range(self.num_nodes):
            out.write(f"{i} {self.parent[i]} {self.depth[i]}\n")
        out.write(f"arcs {len(self.arcs)}\n")
        for a in self.arcs:
            out.write(f"{a.src} {a.dst} {a.token} {a.rnnt_logp!r} {_fmt(a.las_logp)}\n")
        out.write(f"terminals {len(self.terminals)}\n")
        for node in sorted(self.terminals):
            t = self.terminals[node]
            out.write(f"{node} {t.final_rnnt!r} {_fmt(t.final_las)}\n")
        return out.getvalue()

    @classmethod
    def loads(cls, text: str) -> "PrefixTreeLattice":
        lines = text.splitlines()
        try:
            if lines[0] != "lattice v1":
                raise LatticeFormatError("bad lattice header")
            utt = lines[1].split(" ", 1)[1]
            vh = lines[2].split(" ", 1)[1]
            lat = cls(utt_id="" if utt == "-" else utt, vocab_hash="" if vh == "-" else vh)
            pos = 3
            n_nodes = _count(lines[pos], "nodes")
            pos += 1
            for i in range(n_nodes):
                nid, par, dep = (int(x) for x in lines[pos + i].split())
                if nid != i:
                    raise LatticeFormatError("node ids must be dense and ordered")
                if i > 0:
                    lat.parent.append(par)
                    lat.depth.append(dep)
                    lat.children.append({})
                    lat.in_arc.append(-1)
            pos += n_nodes
            n_arcs = _count(lines[pos], "arcs")
            pos += 1
            for i in range(n_arcs):
                src, dst, tok, r, l_ = lines[pos + i].split()
                arc = Arc(int(src), int(dst), int(tok), float(r), _parse(l_))
                if lat.parent[arc.dst] != arc.src or arc.token in lat.children[arc.src]:
                    raise LatticeFormatError("arc table is not a prefix tree")
                lat.arcs.append(arc)
                lat.children[arc.src][arc.token] = i
                lat.in_arc[arc.dst] = i
            pos += n_arcs
            n_term = _count(lines[pos], "terminals")
            pos += 1
            for i in range(n_term):
                node, r, l_ = lines[pos + i].split()
                lat.terminals[int(node)] = Terminal(float(r), _parse(l_))
        except (IndexError, ValueError) as exc:
            if isinstance(exc, LatticeFormatError):
                raise
            raise LatticeFormatError(f"malformed lattice dump: {exc}") from exc
        return lat


def _fmt(x: float | None) -> str:
    return "null" if x is None else repr(float(x))


def _parse(s: str) -> float | None:
    return None if s == "null" else float(s)


def _count(line: str, key: str) -> int:
    name, n = line.split()
    if name != key:
        raise LatticeFormatError(f"expected {key!r} section, found {name!r}")
    return int(n)


def from_hypotheses(hyps: Sequence, **kw) -> PrefixTreeLattice:
    return PrefixTreeLattice.from_beam_hypotheses(hyps, **kw)
