"""Prediction and joint networks for transducer fine-tuning, and greedy decoding."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from .objectives import BLANK


@dataclass
class TransducerConfig:
    vocab_size: int = 9  # including blank at 0
    embed_dim: int = 64
    pred_hidden: int = 128
    pred_layers: int = 2
    joint_dim: int = 256

    def to_dict(self) -> dict:
        return asdict(self)


TRANSDUCER_PRESETS = {
    "toy": TransducerConfig(),
    "base_200m": TransducerConfig(vocab_size=4001, embed_dim=512, pred_hidden=1280, joint_dim=1280),
}


class PredictionNetwork(nn.Module):
    """Label-history LSTM; the blank id doubles as start-of-sequence."""

    def __init__(self, cfg: TransducerConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.lstm = nn.LSTM(cfg.embed_dim, cfg.pred_hidden, num_layers=cfg.pred_layers, batch_first=True)

    def forward(self, labels: Tensor) -> Tensor:
        """[B, U] labels -> [B, U+1, H] outputs (position 0 sees only SOS)."""
        sos = labels.new_full((labels.shape[0], 1), BLANK)
        out, _ = self.lstm(self.embed(torch.cat([sos, labels], dim=1)))
        return out

    def initial_state(self):
        return None

    def step(self, token: int, state):
        x = self.embed(torch.tensor([[token]]))
        out, state = self.lstm(x, state)
        return out[0, 0], state


class JointNetwork(nn.Module):
    def __init__(self, enc_dim: int, cfg: TransducerConfig):
        super().__init__()
        self.enc_proj = nn.Linear(enc_dim, cfg.joint_dim)
        self.pred_proj = nn.Linear(cfg.pred_hidden, cfg.joint_dim)
        self.out = nn.Linear(cfg.joint_dim, cfg.vocab_size)

    def forward(self, enc: Tensor, pred: Tensor) -> Tensor:
        """enc [B, T, D], pred [B, U+1, H] -> logits [B, T, U+1, V]."""
        h = self.enc_proj(enc).unsqueeze(2) + self.pred_proj(pred).unsqueeze(1)
        return self.out(torch.tanh(h))

    def single(self, enc_frame: Tensor, pred_out: Tensor) -> Tensor:
        return self.out(torch.tanh(self.enc_proj(enc_frame) + self.pred_proj(pred_out)))


class Transducer(nn.Module):
    def __init__(self, enc_dim: int, cfg: TransducerConfig):
        super().__init__()
        self.cfg = cfg
        self.predictor = PredictionNetwork(cfg)
        self.joint = JointNetwork(enc_dim, cfg)

    def forward(self, enc: Tensor, labels: Tensor) -> Tensor:
        return self.joint(enc, self.predictor(labels))


@torch.no_grad()
def greedy_transducer_decode(enc_out: Tensor, predictor, joint, blank: int = BLANK,
                             max_symbols_per_frame: int = 10) -> list[int]:
    """Frame-synchronous greedy search.

    At each encoder frame keep emitting the argmax token (advancing the
    prediction network) until blank wins or the per-frame cap is hit.

    ``predictor`` needs ``initial_state()`` and ``step(token, state)``;
    ``joint`` is a callable ``(enc_frame, pred_out) -> logits[V]``.
    """
    hyp: list[int] = []
    state = predictor.initial_state()
    pred_out, state = predictor.step(blank, state)
    for t in range(enc_out.shape[0]):
        for _ in range(max_symbols_per_frame):
            k = int(torch.as_tensor(joint(enc_out[t], pred_out)).argmax())
            if k == blank:
                break
            hyp.append(k)
            pred_out, state = predictor.step(k, state)
    return hyp
