"""Bundle of embedding table, predictor, forward process, optional context encoder."""

from torch import nn

from .errors import ConfigError
from .forward import KINDS, MulanForward, NfdmForward, RampForward
from .nets import ContextEncoder, EmbeddingTable, Predictor, init_parameters


class DiffusionModel(nn.Module):
    """Everything needed to train, sample, and evaluate one latent diffusion run."""

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        seq_len: int,
        kind: str,
        predictor_layers: int = 2,
        forward_layers: int = 2,
        heads: int = 2,
        time_mode: str = "adaln",
        use_context: bool = False,
        fixed_average: bool = False,
        gamma_min: float = -10.0,
        gamma_max: float = 10.0,
        dev_scale: float = 1.0,
        eta: float = 1.0,
        delta: float = 0.01,
        table_std: float = 0.02,
    ):
        super().__init__()
        if kind not in KINDS:
            raise ConfigError(f"unknown forward-process kind {kind!r}")
        if use_context and kind != "mulan":
            raise ConfigError("context conditioning is only defined for the mulan kind")
        self.kind = kind
        self.seq_len = seq_len
        self.dim = dim
        self.table_std = table_std
        self.table = EmbeddingTable(vocab_size, dim)
        self.predictor = Predictor(dim, seq_len, predictor_layers, heads, time_mode, use_context)
        self.encoder = ContextEncoder(vocab_size, dim, seq_len, heads) if use_context else None
        if kind == "static":
            self.process = RampForward(eta=eta)
        elif kind == "mulan":
            self.process = MulanForward(
                seq_len,
                context_dim=dim if use_context else 0,
                fixed_average=fixed_average,
                gamma_min=gamma_min,
                gamma_max=gamma_max,
                dev_scale=dev_scale,
                eta=eta,
            )
        else:
            self.process = NfdmForward(dim, seq_len, forward_layers, heads, delta, time_mode)

    def embed(self, ids):
        return self.table.embed(ids)

    def context(self, ids):
        return self.encoder(ids) if self.encoder is not None else None

    def predict(self, z, t, context=None):
        return self.predictor(z, t, context)

    def init(self, seed: int):
        # table scale is its own knob: with a learned forward process the
        # drift-matching term punishes latent magnitude, and a table started
        # too close together collapses before reconstruction can separate it
        return init_parameters(self, seed, std_overrides={"table.weight": self.table_std})
