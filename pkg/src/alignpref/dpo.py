"""Preference-optimization objective over a pluggable sequence policy.

The loss is -log sigmoid(beta * ((log pi/pi_ref)(chosen) - (log pi/pi_ref)(rejected))),
computed in softplus form for stability. The reference policy is a frozen
copy of the starting policy and never receives updates.

The trainable policy is a source-biased bigram model: next-token logits are
a bigram table row plus the sum of per-source-token bias rows. It is the
smallest conditional sequence model whose log-probabilities and analytic
gradients can be verified end-to-end by brute force.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .aligner import tokenize
from .errors import AlignprefError
from .preference import PreferenceTriplet

UNK_TOKEN = "<unk>"


class EmptyTarget(AlignprefError):
    pass


class EmptyDataset(AlignprefError):
    pass


class NonFiniteInput(AlignprefError):
    pass


@dataclass(frozen=True)
class PolicyScores:
    logp_chosen: float
    logp_rejected: float
    ref_logp_chosen: float
    ref_logp_rejected: float

    def validate(self) -> None:
        for value in (
            self.logp_chosen,
            self.logp_rejected,
            self.ref_logp_chosen,
            self.ref_logp_rejected,
        ):
            if not math.isfinite(value):
                raise NonFiniteInput(f"non-finite log-probability: {value}")


class ToyPolicy:
    """Source-biased bigram policy.

    Next-token logits for target position t are theta[prev] + sum over source
    tokens of phi[s]; theta has one extra row for the BOS context. Unknown
    tokens map to the reserved UNK entry.
    """

    def __init__(self, vocab: Sequence[str], beta: float = 0.1) -> None:
        tokens = sorted(set(vocab) | {UNK_TOKEN})
        self.vocab = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        self.beta = beta
        size = len(tokens)
        self.theta = np.zeros((size + 1, size), dtype=np.float64)
        self.phi = np.zeros((size, size), dtype=np.float64)

    @property
    def bos_id(self) -> int:
        return len(self.vocab)

    def token_id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK_TOKEN])

    def copy(self) -> ToyPolicy:
        other = ToyPolicy(self.vocab, beta=self.beta)
        other.theta = self.theta.copy()
        other.phi = self.phi.copy()
        return other

    def source_bias(self, source_tokens: Sequence[str]) -> np.ndarray:
        bias = np.zeros(len(self.vocab), dtype=np.float64)
        for token in source_tokens:
            bias += self.phi[self.token_id(token)]
        return bias


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sequence_logprob(
    policy: ToyPolicy,
    source_tokens: Sequence[str],
    target_tokens: Sequence[str],
    length_normalize: bool = False,
) -> float:
    """log pi(target | source): sum of per-token log-softmax terms, BOS-initialised."""
    if not target_tokens:
        raise EmptyTarget("target token sequence is empty")
    bias = policy.source_bias(source_tokens)
    total = 0.0
    prev = policy.bos_id
    for token in target_tokens:
        target_id = policy.token_id(token)
        total += float(_log_softmax(policy.theta[prev] + bias)[target_id])
        prev = target_id
    if length_normalize:
        total /= len(target_tokens)
    return total


def dpo_margin(scores: PolicyScores, beta: float) -> float:
    """beta-scaled implicit-reward margin of chosen over rejected."""
    return beta * (
        (scores.logp_chosen - scores.ref_logp_chosen)
        - (scores.logp_rejected - scores.ref_logp_rejected)
    )


def dpo_loss(scores: PolicyScores, beta: float) -> float:
    """-log sigmoid(margin), evaluated as softplus(-margin)."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    scores.validate()
    return _softplus(-dpo_margin(scores, beta))


@dataclass
class PolicyGradients:
    """Analytic gradients of mean batch loss plus per-triplet diagnostics."""

    dtheta: np.ndarray
    dphi: np.ndarray
    mean_loss: float
    margins: list[float] = field(default_factory=list)

    @property
    def reward_accuracy(self) -> float:
        if not self.margins:
            return 0.0
        return sum(1 for m in self.margins if m > 0) / len(self.margins)


def _tokenized(triplet: PreferenceTriplet) -> tuple[list[str], list[str], list[str]]:
    return (
        tokenize(triplet.source),
        tokenize(triplet.chosen.text),
        tokenize(triplet.rejected.text),
    )


def _accumulate_seq_grad(
    policy: ToyPolicy,
    source_tokens: Sequence[str],
    target_tokens: Sequence[str],
    weight: float,
    dtheta: np.ndarray,
    dphi: np.ndarray,
) -> None:
    """Add weight * d(log pi(target|source))/d(theta, phi) into the accumulators."""
    bias = policy.source_bias(source_tokens)
    src_ids = [policy.token_id(tok) for tok in source_tokens]
    prev = policy.bos_id
    for token in target_tokens:
        target_id = policy.token_id(token)
        logits = policy.theta[prev] + bias
        shifted = np.exp(logits - logits.max())
        probs = shifted / shifted.sum()
        grad = -weight * probs
        grad[target_id] += weight
        dtheta[prev] += grad
        for src_id in src_ids:  # repeated source tokens contribute per occurrence
            dphi[src_id] += grad
        prev = target_id


def dpo_grad(
    triplets: Sequence[PreferenceTriplet],
    policy: ToyPolicy,
    ref_policy: ToyPolicy,
    beta: float,
    length_normalize: bool = False,
) -> PolicyGradients:
    """Exact gradients of the mean loss over a batch; the reference policy is
    read-only and receives no gradient.

    length_normalize divides each sequence log-probability by its length
    inside the margin (raw sums are the default).
    """
    if not triplets:
        raise EmptyDataset("cannot compute gradients on an empty batch")
    dtheta = np.zeros_like(policy.theta)
    dphi = np.zeros_like(policy.phi)
    total_loss = 0.0
    margins: list[float] = []
    scale = 1.0 / len(triplets)
    for triplet in triplets:
        source, chosen, rejected = _tokenized(triplet)
        scores = PolicyScores(
            logp_chosen=sequence_logprob(policy, source, chosen, length_normalize),
            logp_rejected=sequence_logprob(policy, source, rejected, length_normalize),
            ref_logp_chosen=sequence_logprob(ref_policy, source, chosen, length_normalize),
            ref_logp_rejected=sequence_logprob(ref_policy, source, rejected, length_normalize),
        )
        margin = dpo_margin(scores, beta)
        total_loss += _softplus(-margin)
        margins.append(margin)
        # d loss / d margin = -sigmoid(-margin); margin = beta * (logp_c - logp_r) + const
        coeff = -_sigmoid(-margin) * beta * scale
        chosen_scale = 1.0 / len(chosen) if length_normalize else 1.0
        rejected_scale = 1.0 / len(rejected) if length_normalize else 1.0
        _accumulate_seq_grad(policy, source, chosen, coeff * chosen_scale, dtheta, dphi)
        _accumulate_seq_grad(policy, source, rejected, -coeff * rejected_scale, dtheta, dphi)
    return PolicyGradients(
        dtheta=dtheta, dphi=dphi, mean_loss=total_loss * scale, margins=margins
    )


@dataclass
class TrainConfig:
    lr: float = 0.5
    epochs: int = 200
    seed: int = 42
    beta: float = 0.1
    length_normalize: bool = False


@dataclass(frozen=True)
class TraceEntry:
    epoch: int
    mean_loss: float
    reward_accuracy: float


def train_toy(
    triplets: Sequence[PreferenceTriplet],
    config: TrainConfig,
    initial_policy: ToyPolicy | None = None,
) -> tuple[ToyPolicy, list[TraceEntry]]:
    """Full-batch gradient descent on the mean loss.

    The reference policy is a frozen copy of the starting policy, so the
    initial loss is exactly ln 2. Trace entry e reports the loss and reward
    accuracy after e updates; with small learning rates the trace is
    non-increasing.
    """
    if not triplets:
        raise EmptyDataset("training needs at least one triplet")
    if initial_policy is not None:
        policy = initial_policy.copy()
    else:
        vocab = sorted(
            {tok for triplet in triplets for part in _tokenized(triplet) for tok in part}
        )
        policy = ToyPolicy(vocab, beta=config.beta)
    ref_policy = policy.copy()

    trace: list[TraceEntry] = []
    for epoch in range(config.epochs + 1):
        grads = dpo_grad(
            triplets, policy, ref_policy, config.beta, config.length_normalize
        )
        trace.append(TraceEntry(epoch, grads.mean_loss, grads.reward_accuracy))
        if epoch == config.epochs:
            break
        policy.theta -= config.lr * grads.dtheta
        policy.phi -= config.lr * grads.dphi
    return policy, trace


def save_trace(path: str | Path, trace: Sequence[TraceEntry], header: dict[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            pairs = " ".join(f"{k}={header[k]}" for k in sorted(header))
            fh.write(f"# {pairs}\n")
        fh.write("epoch\tmean_loss\treward_accuracy\n")
        for entry in trace:
            fh.write(f"{entry.epoch}\t{entry.mean_loss:.12g}\t{entry.reward_accuracy:.12g}\n")


def save_policy(path: str | Path, policy: ToyPolicy, header: dict[str, Any] | None = None) -> None:
    """Self-describing text dump: vocab line, then one row per theta/phi context."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            pairs = " ".join(f"{k}={header[k]}" for k in sorted(header))
            fh.write(f"# {pairs}\n")
        fh.write(f"# toy-policy beta={policy.beta!r}\n")
        fh.write("VOCAB\t" + "\t".join(policy.vocab) + "\n")
        contexts = policy.vocab + ["<bos>"]
        for row, name in zip(policy.theta, contexts):
            fh.write("THETA\t" + name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
        for row, name in zip(policy.phi, policy.vocab):
            fh.write("PHI\t" + name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def load_policy(path: str | Path) -> ToyPolicy:
    beta = 0.1
    vocab: list[str] | None = None
    theta_rows: dict[str, list[float]] = {}
    phi_rows: dict[str, list[float]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# toy-policy"):
                beta = float(line.split("beta=")[1])
                continue
            if not line or line.startswith("#"):
                continue
            kind, _, rest = line.partition("\t")
            if kind == "VOCAB":
                vocab = rest.split("\t")
            elif kind in ("THETA", "PHI"):
                name, _, values = rest.partition("\t")
                row = [float(v) for v in values.split("\t")]
                (theta_rows if kind == "THETA" else phi_rows)[name] = row
    if vocab is None:
        raise ValueError(f"no VOCAB line in policy file {path}")
    policy = ToyPolicy(vocab, beta=beta)
    for name, row in theta_rows.items():
        index = policy.bos_id if name == "<bos>" else policy.token_id(name)
        policy.theta[index] = row
    for name, row in phi_rows.items():
        policy.phi[policy.token_id(name)] = row
    return policy
