"""Synthetic modular-arithmetic task: tokenizer, problems, verifier and trajectory harvesting.

A problem is a left-to-right chain of binary operations over single digits,
reduced modulo a small prime::

    <q> 2 * 3 + 4 =  |  <a> 1 0 <eos>
    ---- prompt ----    -- response --
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import ModelParams, extend, prefill, copy_trace
from .numerics import RngState

PAD, Q, A, EOS, EQ = "<pad>", "<q>", "<a>", "<eos>", "="
OPERATORS = ("+", "-", "*")
DIGITS = tuple(str(i) for i in range(10))
_CORE = (PAD, Q, A, EOS, EQ) + OPERATORS + DIGITS
# reserved ids pad the table to the default vocabulary size; the task never emits them
VOCAB: tuple[str, ...] = _CORE + tuple(f"<r{i}>" for i in range(len(_CORE), 40))
TOKEN_ID = {s: i for i, s in enumerate(VOCAB)}
DEFAULT_MODULUS = 11


def encode(symbols: Iterable[str]) -> list[int]:
    return [TOKEN_ID[s] for s in symbols]


def decode(ids: Iterable[int]) -> list[str]:
    return [VOCAB[int(i)] for i in ids]


def evaluate(operands: Sequence[int], ops: Sequence[str], modulus: int) -> int:
    """Left-to-right evaluation (no precedence), reduced mod ``modulus`` after each op."""
    acc = operands[0] % modulus
    for op, b in zip(ops, operands[1:]):
        if op == "+":
            acc = (acc + b) % modulus
        elif op == "-":
            acc = (acc - b) % modulus
        elif op == "*":
            acc = (acc * b) % modulus
        else:
            raise ValueError(f"unknown operator {op!r}")
    return acc


def response_tokens(answer: int) -> list[int]:
    return encode([A, *str(answer), EOS])


@dataclass(frozen=True)
class Problem:
    id: str
    operands: tuple[int, ...]
    ops: tuple[str, ...]
    modulus: int = DEFAULT_MODULUS

    @property
    def difficulty(self) -> int:
        return len(self.ops)

    @property
    def answer(self) -> int:
        return evaluate(self.operands, self.ops, self.modulus)

    @property
    def expression(self) -> str:
        out = [str(self.operands[0])]
        for op, b in zip(self.ops, self.operands[1:]):
            out += [op, str(b)]
        return "".join(out)

    @property
    def prompt(self) -> list[int]:
        syms = [Q, str(self.operands[0])]
        for op, b in zip(self.ops, self.operands[1:]):
            syms += [op, str(b)]
        return encode(syms + [EQ])

    @property
    def solution(self) -> list[int]:
        return response_tokens(self.answer)

    def to_record(self, split: str | None = None) -> dict:
        rec = {
            "id": self.id, "difficulty": self.difficulty, "modulus": self.modulus,
            "expression": self.expression, "operands": list(self.operands), "ops": list(self.ops),
            "answer": self.answer, "prompt": self.prompt, "response": self.solution,
        }
        if split is not None:
            rec["split"] = split
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> Problem:
        return cls(rec["id"], tuple(rec["operands"]), tuple(rec["ops"]), rec["modulus"])


def gen_problem(rng: RngState, difficulty: int, modulus: int = DEFAULT_MODULUS, problem_id: str = "p") -> Problem:
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    operands = tuple(int(v) for v in rng.gen.integers(0, 10, size=difficulty + 1))
    ops = tuple(OPERATORS[int(i)] for i in rng.gen.integers(0, len(OPERATORS), size=difficulty))
    return Problem(problem_id, operands, ops, modulus)


def parse_expression(expr: str, modulus: int = DEFAULT_MODULUS, problem_id: str = "p") -> Problem:
    """Build a problem from text such as ``"2*3+4"`` (``x``/``×`` accepted for ``*``)."""
    expr = expr.replace("×", "*").replace("x", "*").replace(" ", "")
    return Problem(problem_id, tuple(int(c) for c in expr[0::2]), tuple(expr[1::2]), modulus)


def verify(problem: Problem, completion: Sequence[int]) -> bool:
    """Exact match of the span after the final ``=`` against ``<a> digits <eos>``."""
    full = list(problem.prompt) + [int(t) for t in completion]
    eq = TOKEN_ID[EQ]
    last = max(i for i, t in enumerate(full) if t == eq)
    return full[last + 1:] == problem.solution


@dataclass
class Trajectory:
    problem_id: str
    prompt: list[int]
    response: list[int]
    answer: int
    verified: bool = False

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.response

    @property
    def response_mask(self) -> list[int]:
        return [0] * len(self.prompt) + [1] * len(self.response)

    def target_positions(self) -> np.ndarray:
        """Positions whose next token is a response token."""
        return np.arange(len(self.prompt) - 1, len(self.prompt) + len(self.response) - 1)

    def check(self) -> bool:
        eq = TOKEN_ID[EQ]
        full = self.tokens
        idx = [i for i, t in enumerate(full) if t == eq]
        return bool(idx) and full[idx[-1] + 1:] == response_tokens(self.answer)

    def to_record(self) -> dict:
        return {
            "problem_id": self.problem_id, "prompt": self.prompt, "response": self.response,
            "answer": self.answer, "verified": self.verified, "response_mask": self.response_mask,
        }

    @classmethod
    def from_record(cls, rec: dict) -> Trajectory:
        traj = cls(rec["problem_id"], list(rec["prompt"]), list(rec["response"]), int(rec["answer"]),
                   bool(rec["verified"]))
        if rec.get("response_mask") is not None and rec["response_mask"] != traj.response_mask:
            raise ValueError(f"{traj.problem_id}: response_mask inconsistent with prompt/response lengths")
        return traj

    @classmethod
    def from_problem(cls, problem: Problem, completion: Sequence[int]) -> Trajectory:
        return cls(problem.id, problem.prompt, [int(t) for t in completion], problem.answer,
                   verify(problem, completion))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 1.0
    max_new_tokens: int = 6


def sample_token(logits: np.ndarray, temperature: float, rng: RngState) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = rng.uniform(1)[0] * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def sample_completions(params: ModelParams, prompt: Sequence[int], n: int, decode_cfg: DecodeConfig,
                       rng: RngState) -> list[list[int]]:
    """``n`` independent completions of ``prompt``, each stopping at ``<eos>`` or the token budget."""
    cfg = params.config
    # the last sampled token is never fed back, hence the -1
    capacity = min(len(prompt) + decode_cfg.max_new_tokens - 1, cfg.max_context)
    base = prefill(params, prompt, max(capacity, len(prompt)))
    eos = TOKEN_ID[EOS]
    out = []
    for _ in range(n):
        tr = copy_trace(base)
        logits = tr.logits[len(prompt) - 1]
        seq: list[int] = []
        while True:
            tok = sample_token(logits, decode_cfg.temperature, rng)
            seq.append(tok)
            if tok == eos or tr.length >= capacity:
                break
            logits = extend(params, tr, tok)
        out.append(seq)
    return out


Sampler = Callable[[Problem, int, RngState], list[list[int]]]


def model_sampler(params: ModelParams, decode_cfg: DecodeConfig) -> Sampler:
    def sample(problem: Problem, n: int, rng: RngState) -> list[list[int]]:
        return sample_completions(params, problem.prompt, n, decode_cfg, rng)
    return sample


@dataclass
class HarvestStats:
    problems: int = 0
    samples: int = 0
    correct_samples: int = 0
    kept: int = 0

    @property
    def sample_yield(self) -> float:
        return self.correct_samples / self.samples if self.samples else 0.0

    @property
    def problem_yield(self) -> float:
        return self.kept / self.problems if self.problems else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "sample_yield": self.sample_yield, "problem_yield": self.problem_yield}


def harvest_trajectories(params: ModelParams | None, problems: Sequence[Problem], samples_per_problem: int = 4,
                         rng: RngState | None = None, decode_cfg: DecodeConfig = DecodeConfig(),
                         sampler: Sampler | None = None) -> tuple[list[Trajectory], HarvestStats]:
    """Sample completions per problem and keep the first verified-correct one.

    Each problem draws from its own child stream keyed by problem id, so the
    result does not depend on problem order.
    """
    if samples_per_problem < 1:
        raise ValueError("samples_per_problem must be >= 1")
    rng = rng or RngState(42)
    sampler = sampler or model_sampler(params, decode_cfg)
    stats = HarvestStats()
    kept = []
    for prob in problems:
        completions = sampler(prob, samples_per_problem, rng.child("harvest", prob.id))
        stats.problems += 1
        stats.samples += len(completions)
        first = None
        for comp in completions:
            if verify(prob, comp):
                stats.correct_samples += 1
                if first is None:
                    first = comp
        if first is not None:
            kept.append(Trajectory.from_problem(prob, first))
            stats.kept += 1
    return kept, stats


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def build_corpus(seed: int, problems: int, difficulty_range: tuple[int, int] = (1, 6),
                 eval_fraction: float = 0.2, modulus: int = DEFAULT_MODULUS) -> list[tuple[Problem, str]]:
    """Deterministic problem set split into ``train`` and ``eval`` (disjoint by id)."""
    lo, hi = difficulty_range
    root = RngState(seed).child("corpus")
    n_eval = int(round(problems * eval_fraction))
    out = []
    for i in range(problems):
        r = root.child(i)
        difficulty = int(r.gen.integers(lo, hi + 1))
        split = "eval" if i >= problems - n_eval else "train"
        out.append((gen_problem(r, difficulty, modulus, problem_id=f"p{i:06d}"), split))
    return out


def write_jsonl(path, records: Iterable[dict], header: dict | None = None) -> None:
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines.extend(json.dumps(r, sort_keys=True) for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_jsonl(path) -> tuple[dict | None, list[dict]]:
    header, records = None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "header" in rec and header is None and not records:
            header = rec["header"]
        else:
            records.append(rec)
    return header, records


def save_corpus(path, corpus: Sequence[tuple[Problem, str]], header: dict | None = None) -> None:
    write_jsonl(path, (p.to_record(split) for p, split in corpus), header)


def load_corpus(path, split: str | None = None) -> list[Problem]:
    _, recs = read_jsonl(path)
    return [Problem.from_record(r) for r in recs if split is None or r.get("split") == split]


def save_trajectories(path, trajectories: Sequence[Trajectory], header: dict | None = None) -> None:
    write_jsonl(path, (t.to_record() for t in trajectories), header)


def load_trajectories(path) -> list[Trajectory]:
    """Load and re-verify; any record that fails verification raises ``ValueError``."""
    _, recs = read_jsonl(path)
    out = []
    for rec in recs:
        traj = Trajectory.from_record(rec)
        if not traj.verified or not traj.check():
            raise ValueError(f"trajectory {traj.problem_id} fails verification")
        out.append(traj)
    return out
