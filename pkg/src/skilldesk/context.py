"""Skill-level context: instructed triples and the online hidden context.

The instructed path translates (instruction, plan) into executable-skill
triples — (skill, factor, magnitude) serialized as tokens. The online path
encodes recent state-action history with a small recurrent net, quantizes
it against a codebook with a straight-through estimator, and is trained
jointly with an inverse-dynamics decoder plus a same-trajectory contrastive
term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import SkillInstruction
from .errors import GrammarError, TripleArityError, ValidationError
from .nets import TinySeq2Seq, mlp, train_seq2seq
from .prompts import ALL_SKILLS, parse_context_clause
from .vocab import PLAN, Vocab, tokenize
from .world import SKILL_NAMES, SPEED_LEVELS, Trajectory, WIND_LEVELS

HISTORY_WINDOW = 3  # H': actions per history window (states carry one more)

FACTORS = ("wind", "speed", "none")
MAGNITUDES = ("breeze", "gust", "flurry", "slow", "normal", "fast", "none")


@dataclass(frozen=True)
class ExecutableSkill:
    z: int
    f_z: str = "none"
    d_z: str = "none"

    def __post_init__(self):
        if self.f_z not in FACTORS:
            raise ValidationError(f"unknown domain factor {self.f_z!r}")
        ok = {
            "wind": self.d_z in WIND_LEVELS,
            "speed": self.d_z in SPEED_LEVELS,
            "none": self.d_z == "none",
        }[self.f_z]
        if not ok:
            raise ValidationError(f"magnitude {self.d_z!r} inconsistent with factor {self.f_z!r}")


def serialize_triples(triples: list[ExecutableSkill]) -> list[str]:
    """Wire-stable form: "( <skill words> , <factor> , <magnitude> )"."""
    tokens: list[str] = []
    for tr in triples:
        tokens.append("(")
        tokens.extend(tokenize(SKILL_NAMES[tr.z]))
        tokens.extend([",", tr.f_z, ",", tr.d_z, ")"])
    return tokens


def parse_triples(tokens: list[str]) -> list[ExecutableSkill]:
    triples = []
    i = 0
    name_to_id = {tuple(tokenize(n)): k for k, n in enumerate(SKILL_NAMES)}
    while i < len(tokens):
        if tokens[i] != "(":
            raise GrammarError(f"expected '(' at position {i} in {tokens}")
        try:
            c1 = tokens.index(",", i)
            c2 = tokens.index(",", c1 + 1)
            close = tokens.index(")", c2 + 1)
        except ValueError as exc:
            raise GrammarError(f"malformed triple in {tokens}") from exc
        name = tuple(tokens[i + 1 : c1])
        if name not in name_to_id:
            raise GrammarError(f"unknown skill words {name}")
        factor = tokens[c1 + 1 : c2]
        magnitude = tokens[c2 + 1 : close]
        if len(factor) != 1 or len(magnitude) != 1:
            raise GrammarError(f"malformed factor/magnitude in {tokens}")
        triples.append(ExecutableSkill(name_to_id[name], factor[0], magnitude[0]))
        i = close + 1
    return triples


def oracle_triples(plan: list[int], clause_text: str) -> list[ExecutableSkill]:
    """Ground-truth triples from the rule-based clause parser.

    Skills outside the constrained scope stay (none, none); a clause naming
    "all skills" (and any wind clause) applies to the whole plan.
    """
    constrained, factor, magnitude = parse_context_clause(clause_text)
    out = []
    for z in plan:
        if factor == "none":
            out.append(ExecutableSkill(z))
        elif constrained == ALL_SKILLS or constrained == z:
            out.append(ExecutableSkill(z, factor, magnitude))
        else:
            out.append(ExecutableSkill(z))
    return out


def plan_tokens(plan: list[int]) -> list[str]:
    toks: list[str] = []
    for i, z in enumerate(plan):
        if i > 0:
            toks.append("then")
        toks.extend(tokenize(SKILL_NAMES[z]))
    return toks


class InstructedContextEncoder:
    """Seq-to-seq from (instruction ++ plan) tokens to serialized triples."""

    def __init__(
        self,
        vocab: Vocab,
        d_model: int = 64,
        ff_dim: int = 32,
        dropout: float = 0.15,
        max_len: int = 96,
    ):
        self.vocab = vocab
        self.model = TinySeq2Seq(
            src_vocab=len(vocab),
            tgt_vocab=len(vocab),
            d_model=d_model,
            ff_dim=ff_dim,
            dropout=dropout,
            max_len=max_len,
            pad_id=vocab.pad_id,
            bos_id=vocab.bos_id,
            eos_id=vocab.eos_id,
        )

    def _src(self, instruction_tokens: list[str], plan: list[int]) -> list[int]:
        return self.vocab.encode(instruction_tokens + [PLAN] + plan_tokens(plan))

    def train(
        self,
        pairs: list[tuple[list[str], list[int], list[ExecutableSkill]]],
        epochs: int = 12,
        batch_size: int = 3,
        lr: float = 1e-4,
        seed: int = 0,
    ) -> float:
        encoded = [
            (self._src(tokens, plan), self.vocab.encode(serialize_triples(triples)))
            for tokens, plan, triples in pairs
        ]
        return train_seq2seq(
            self.model, encoded, epochs, batch_size, lr, np.random.default_rng(seed)
        )

    def encode_context(
        self, instruction: SkillInstruction, plan: list[int]
    ) -> list[ExecutableSkill]:
        if not plan:
            raise ValidationError("plan must contain at least one skill")
        out_ids = self.model.greedy_decode(self._src(instruction.tokens, plan))
        tokens = self.vocab.decode(out_ids)
        triples = parse_triples(tokens)
        if len(triples) != len(plan):
            raise TripleArityError(len(plan), len(triples), " ".join(tokens))
        return triples

    def exact_match(
        self, pairs: list[tuple[list[str], list[int], list[ExecutableSkill]]]
    ) -> float:
        hits = 0
        for tokens, plan, triples in pairs:
            try:
                hits += int(self.encode_context(SkillInstruction(tokens), plan) == triples)
            except Exception:
                pass
        return hits / len(pairs) if pairs else 0.0


class OnlineContextEncoder(nn.Module):
    """Recurrent history encoder with vector-quantized output."""

    def __init__(
        self,
        state_dim: int,
        hidden: int = 32,
        code_dim: int = 16,
        n_codes: int = 50,
        window: int = HISTORY_WINDOW,
        dead_code_patience: int = 100,
        commitment: float = 0.25,
    ):
        super().__init__()
        self.state_dim = state_dim
        self.window = window
        self.code_dim = code_dim
        self.n_codes = n_codes
        self.commitment = commitment
        self.dead_code_patience = dead_code_patience
        # per-step features: state, action, and the realized position delta
        self.lstm = nn.LSTM(state_dim + 4 + 2, hidden, batch_first=True)
        self.to_code = nn.Linear(hidden, code_dim)
        codebook = torch.empty(n_codes, code_dim).uniform_(-1.0, 1.0)
        self.codebook = nn.Parameter(codebook)
        self.register_buffer("unused_steps", torch.zeros(n_codes, dtype=torch.long))

    def encode_features(self, feats: torch.Tensor) -> torch.Tensor:
        _, (h, _) = self.lstm(feats)
        return self.to_code(h[-1])

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Nearest codebook row with a straight-through gradient path."""
        d = torch.cdist(z, self.codebook)
        idx = d.argmin(dim=1)
        e = self.codebook[idx]
        vq_loss = F.mse_loss(e, z.detach()) + self.commitment * F.mse_loss(z, e.detach())
        q = z + (e - z).detach()
        return q, idx, vq_loss

    def forward(self, feats: torch.Tensor):
        z = self.encode_features(feats)
        return self.quantize(z) + (z,)

    @torch.no_grad()
    def reinit_dead_codes(self, batch_z: torch.Tensor, used_idx: torch.Tensor, rng: np.random.Generator):
        self.unused_steps += 1
        self.unused_steps[used_idx.unique()] = 0
        dead = torch.nonzero(self.unused_steps >= self.dead_code_patience).flatten()
        for code in dead.tolist():
            pick = int(rng.integers(batch_z.shape[0]))
            self.codebook.data[code] = batch_z[pick]
            self.unused_steps[code] = 0


class InverseDynamicsDecoder(nn.Module):
    """Predicts the withheld action from the hidden context and states."""

    def __init__(self, code_dim: int, state_dim: int, hidden: int = 32):
        super().__init__()
        self.net = mlp([code_dim + 2 * state_dim, hidden, hidden, 4], activation=nn.ReLU)

    def forward(self, h: torch.Tensor, s_t: torch.Tensor, s_next: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([h, s_t, s_next], dim=-1))


def history_features(
    states: np.ndarray, actions: np.ndarray, t: int, window: int = HISTORY_WINDOW
) -> np.ndarray:
    """Features for the window (s_{t-H':t}, a_{t-H':t-1}); history shorter
    than the window is padded by repeating the earliest state."""
    n_steps = window + 1
    rows = []
    for i in range(t - window, t + 1):
        j = max(i, 0)
        s = states[j]
        if i < t:
            a = actions[j] if i >= 0 else np.zeros(4)
            dpos = states[min(j + 1, t)][:2] - s[:2] if i >= 0 else np.zeros(2)
        else:
            a = np.zeros(4)
            dpos = np.zeros(2)
        rows.append(np.concatenate([s, a, dpos]))
    assert len(rows) == n_steps
    return np.asarray(rows, dtype=np.float32)


def batch_history_features(traj: Trajectory, window: int = HISTORY_WINDOW) -> np.ndarray:
    return np.stack([history_features(traj.states, traj.actions, t, window) for t in range(len(traj))])


@torch.no_grad()
def infer_hidden_context(
    encoder: OnlineContextEncoder, states: np.ndarray, actions: np.ndarray
) -> tuple[int, np.ndarray]:
    """Quantized hidden context for the newest timestep of a history buffer."""
    encoder.eval()
    t = len(states) - 1
    feats = history_features(np.asarray(states), np.asarray(actions), t, encoder.window)
    q, idx, _, _ = encoder(torch.as_tensor(feats)[None])
    return int(idx[0]), q[0].numpy()


def train_online_context(
    encoder: OnlineContextEncoder,
    decoder: InverseDynamicsDecoder,
    trajectories: list[Trajectory],
    alpha: float = 0.1,
    steps: int = 1200,
    batch_size: int = 256,
    lr: float = 1e-4,
    seed: int = 0,
    action_drop: float = 0.35,
    axis3_drop: float = 0.35,
    contrast_temperature: float = 0.1,
) -> dict:
    """Joint reconstruction + contrastive + codebook training.

    Random action-feature dropout forces the encoder to also read the
    realized dynamics (position deltas) rather than copying the actions,
    which is what lets the code track unseen perturbations at evaluation.
    """
    usable = [tr for tr in trajectories if len(tr) >= 2 * encoder.window]
    if not usable:
        raise ValidationError("no trajectory long enough for history windows")
    rng = np.random.default_rng(seed)
    feats_all = [batch_history_features(tr, encoder.window) for tr in usable]
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    encoder.train()
    decoder.train()
    sd = encoder.state_dim
    last: dict = {}
    for _ in range(steps):
        ti = rng.integers(len(usable), size=batch_size)
        anchor, pos, s_t, s_next, a_t = [], [], [], [], []
        for traj_idx in ti:
            traj = usable[traj_idx]
            t = int(rng.integers(len(traj) - 1))
            t_pos = int(rng.integers(len(traj) - 1))
            anchor.append(feats_all[traj_idx][t])
            pos.append(feats_all[traj_idx][t_pos])
            s_t.append(traj.states[t])
            s_next.append(traj.states[t + 1])
            a_t.append(traj.actions[t])
        anchor = torch.as_tensor(np.stack(anchor))
        pos = torch.as_tensor(np.stack(pos))

        # feature dropout: whole action block, and the fourth axis alone
        drop_all = torch.as_tensor(rng.uniform(size=batch_size) < action_drop)
        drop_a3 = torch.as_tensor(rng.uniform(size=batch_size) < axis3_drop)
        anchor[drop_all, :, sd : sd + 4] = 0.0
        anchor[drop_a3, :, sd + 3] = 0.0

        q, idx, vq_loss, z_pre = encoder(anchor)
        z_pos = encoder.encode_features(pos)

        pred = decoder(
            q,
            torch.as_tensor(np.stack(s_t), dtype=torch.float32),
            torch.as_tensor(np.stack(s_next), dtype=torch.float32),
        )
        recon = F.mse_loss(pred, torch.as_tensor(np.stack(a_t), dtype=torch.float32))

        za = F.normalize(z_pre, dim=-1)
        zp = F.normalize(z_pos, dim=-1)
        logits = za @ zp.T / contrast_temperature
        target = torch.arange(batch_size)
        contrast = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))

        loss = recon + alpha * contrast + vq_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        encoder.reinit_dead_codes(z_pre.detach(), idx, rng)
        last = {
            "loss": float(loss.detach()),
            "recon": float(recon),
            "contrast": float(contrast),
            "vq": float(vq_loss),
        }
    encoder.eval()
    decoder.eval()
    return last


@torch.no_grad()
def trajectory_codes(
    encoder: OnlineContextEncoder, traj: Trajectory, stride: int = 5
) -> np.ndarray:
    feats = np.stack(
        [history_features(traj.states, traj.actions, t, encoder.window) for t in range(0, len(traj), stride)]
    )
    _, idx, _, _ = encoder(torch.as_tensor(feats))
    return idx.numpy()


def code_purity(encoder: OnlineContextEncoder, groups: dict[object, list[Trajectory]]) -> float:
    """Fraction of windows whose code's majority group matches their own."""
    votes: dict[int, dict[object, int]] = {}
    per_window: list[tuple[int, object]] = []
    for key, trajs in groups.items():
        for traj in trajs:
            for code in trajectory_codes(encoder, traj):
                votes.setdefault(int(code), {}).setdefault(key, 0)
                votes[int(code)][key] += 1
                per_window.append((int(code), key))
    majority = {code: max(v, key=v.get) for code, v in votes.items()}
    hits = sum(1 for code, key in per_window if majority[code] == key)
    return hits / len(per_window)
