"""Differentiable building blocks, parameter groups and the freeze-aware update.

Layers are ``torch.nn`` modules; reverse-mode gradients come from autograd.
Recurrent layers expose a full-sequence path (``forward``) and a single-step
path (``step``) that share weights and agree to rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

GROUP_NAMES = (
    "phone_embedding",
    "tone_stress_embedding",
    "language_embedding",
    "emotion_embedding",
    "speaker_embedding",
    "encoder",
    "duration_model",
    "decoder",
    "postnet",
)


class FreezeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


def freeze_set(names: Iterable[str]) -> frozenset:
    names = frozenset(names)
    unknown = names - set(GROUP_NAMES)
    if unknown:
        raise FreezeError(f"unknown parameter groups: {sorted(unknown)}")
    return names


def group_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


def param_groups(model: nn.Module) -> Dict[str, Dict[str, nn.Parameter]]:
    """Partition named parameters by group; every parameter belongs to exactly one."""
    groups: Dict[str, Dict[str, nn.Parameter]] = {g: {} for g in GROUP_NAMES}
    for name, p in model.named_parameters():
        g = group_of(name)
        if g not in groups:
            raise FreezeError(f"parameter {name} is outside every declared group")
        groups[g][name] = p
    n_total = sum(1 for _ in model.parameters())
    if sum(len(v) for v in groups.values()) != n_total:
        raise FreezeError("parameter groups do not partition the model")
    return groups


# --- initialisation ---------------------------------------------------------

def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in uniform for matrices, zeros for biases, N(0, 0.1) for embeddings."""
    gen = torch.Generator().manual_seed(seed)
    embedding_params = {id(m.weight) for m in module.modules() if isinstance(m, nn.Embedding)}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if id(p) in embedding_params:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 0.1)
            elif p.dim() == 1:
                p.zero_()
            else:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                u = torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1
                p.copy_((u * bound).to(p.dtype))


# --- layers -----------------------------------------------------------------

_ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": F.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
}


class FC(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, activation: str = "linear"):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.activation = activation
        self._act = _ACTIVATIONS[activation]

    def forward(self, x: Tensor) -> Tensor:
        return self._act(self.linear(x))


class Prenet(nn.Sequential):
    def __init__(self, in_dim: int, sizes: Sequence[int]):
        dims = [in_dim] + list(sizes)
        super().__init__(*[FC(a, b, "relu") for a, b in zip(dims[:-1], dims[1:])])


class Recurrent(nn.Module):
    """Unidirectional LSTM with matching full-sequence and step-wise paths."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden
        self.lstm = nn.LSTM(in_dim, hidden, batch_first=True)

    def initial_state(self, batch: int, like: Tensor) -> Tuple[Tensor, Tensor]:
        z = like.new_zeros(batch, self.hidden)
        return z, z.clone()

    def step(self, x: Tensor, state: Optional[Tuple[Tensor, Tensor]] = None):
        """One time step: x (B, in_dim) -> (h, (h, c))."""
        if state is None:
            state = self.initial_state(x.shape[0], x)
        h, c = state
        gates = (x @ self.lstm.weight_ih_l0.t() + self.lstm.bias_ih_l0
                 + h @ self.lstm.weight_hh_l0.t() + self.lstm.bias_hh_l0)
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, (h, c)

    def forward(self, x: Tensor, state=None) -> Tensor:
        """Full sequence: x (B, T, in_dim) -> (B, T, hidden)."""
        if state is not None:
            state = (state[0].unsqueeze(0).contiguous(), state[1].unsqueeze(0).contiguous())
        out, _ = self.lstm(x, state)
        return out

    def forward_stepwise(self, x: Tensor, state=None) -> Tensor:
        outs = []
        for t in range(x.shape[1]):
            h, state = self.step(x[:, t], state)
            outs.append(h)
        return torch.stack(outs, dim=1)


class ResidualRecurrent(Recurrent):
    """output = input + LSTM(input); widths must match."""

    def __init__(self, width: int):
        super().__init__(width, width)

    def step(self, x: Tensor, state=None):
        h, state = super().step(x, state)
        return x + h, state

    def forward(self, x: Tensor, state=None) -> Tensor:
        return x + super().forward(x, state)


class BiRecurrent(nn.Module):
    """Stacked bidirectional LSTM over padded batches; output width 2*hidden."""

    def __init__(self, in_dim: int, hidden: int, num_layers: int = 1):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, hidden, num_layers=num_layers, batch_first=True,
                            bidirectional=True)

    def forward(self, x: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        if lengths is None:
            out, _ = self.lstm(x)
            return out
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class Highway(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.transform = nn.Linear(width, width)
        self.gate = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        t = torch.sigmoid(self.gate(x))
        return t * F.relu(self.transform(x)) + (1 - t) * x


class CBHG(nn.Module):
    """Convolution bank, max-pool, projections, highway stack, bidirectional LSTM.

    Input/output (B, T, width). Padded positions are zeroed before every
    convolution so valid outputs match an unpadded run.
    """

    def __init__(self, width: int, bank_size: int = 8, bank_channels: int = 32,
                 n_highway: int = 4):
        super().__init__()
        self.width = width
        self.bank = nn.ModuleList(
            nn.Conv1d(width, bank_channels, k, padding=k // 2) for k in range(1, bank_size + 1))
        self.proj1 = nn.Conv1d(bank_size * bank_channels, width, 3, padding=1)
        self.proj2 = nn.Conv1d(width, width, 3, padding=1)
        self.highways = nn.ModuleList(Highway(width) for _ in range(n_highway))
        self.rnn = BiRecurrent(width, width // 2)
        if width % 2:
            raise ValueError("CBHG width must be even")

    def forward(self, x: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        T = x.shape[1]
        mask = None
        if lengths is not None:
            mask = (torch.arange(T, device=x.device)[None, :] < lengths[:, None]).unsqueeze(1)
        y = x.transpose(1, 2)
        if mask is not None:
            y = y * mask
        bank = torch.cat([F.relu(conv(y)[:, :, :T]) for conv in self.bank], dim=1)
        # causal max-pool of width 2 (stride 1)
        bank = torch.maximum(bank, F.pad(bank, (1, 0), value=float("-inf"))[:, :, :T])
        if mask is not None:
            bank = bank * mask
        z = F.relu(self.proj1(bank))
        if mask is not None:
            z = z * mask
        z = self.proj2(z).transpose(1, 2) + x
        for hw in self.highways:
            z = hw(z)
        return self.rnn(z, lengths)


class AdditiveAttention(nn.Module):
    """score_j = v . tanh(W_q q + W_k m_j + b), softmax over an allowed set."""

    def __init__(self, query_dim: int, memory_dim: int, depth: int):
        super().__init__()
        self.query = nn.Linear(query_dim, depth)
        self.key = nn.Linear(memory_dim, depth, bias=False)
        self.v = nn.Linear(depth, 1, bias=False)

    def keys(self, memory: Tensor) -> Tensor:
        return self.key(memory)

    def attend(self, query: Tensor, keys: Tensor, memory: Tensor, mask: Optional[Tensor] = None):
        """query (B, Q), keys (B, K, A), memory (B, K, E), mask (B, K) -> (context, weights)."""
        scores = self.v(torch.tanh(self.query(query).unsqueeze(1) + keys)).squeeze(-1)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if mask is not None:
            weights = weights.masked_fill(~mask, 0.0)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        return context, weights

    def forward(self, query: Tensor, memory: Tensor, mask: Optional[Tensor] = None):
        return self.attend(query, self.keys(memory), memory, mask)

    def windowed(self, query: Tensor, keys: Tensor, memory: Tensor, center: Tensor,
                 lengths: Tensor, half_width: int):
        """Attend over rows [center-W, center+W] intersected with [0, length).

        Returns (context, window weights (B, 2W+1), window row indices (B, 2W+1)).
        """
        offsets = torch.arange(-half_width, half_width + 1, device=query.device)
        idx = center[:, None] + offsets[None, :]
        valid = (idx >= 0) & (idx < lengths[:, None])
        safe = idx.clamp(0, keys.shape[1] - 1)
        k = torch.gather(keys, 1, safe.unsqueeze(-1).expand(-1, -1, keys.shape[-1]))
        m = torch.gather(memory, 1, safe.unsqueeze(-1).expand(-1, -1, memory.shape[-1]))
        context, weights = self.attend(query, k, m, valid)
        return context, weights, idx


# --- layer specs and functional wrappers -------------------------------------

LAYER_KINDS = ("fully_connected", "recurrent", "residual_recurrent", "bidirectional_recurrent",
               "embedding", "cbhg", "attention")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: Tuple[int, ...]
    activation: str = "linear"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not self.dims or any(d <= 0 for d in self.dims):
            raise ValueError("layer dims must be positive")


def build_layer(spec: LayerSpec, seed: int = 0, dtype=torch.float32) -> nn.Module:
    d = spec.dims
    if spec.kind == "fully_connected":
        layer = FC(d[0], d[1], spec.activation)
    elif spec.kind == "recurrent":
        layer = Recurrent(d[0], d[1])
    elif spec.kind == "residual_recurrent":
        layer = ResidualRecurrent(d[0])
    elif spec.kind == "bidirectional_recurrent":
        layer = BiRecurrent(d[0], d[1], d[2] if len(d) > 2 else 1)
    elif spec.kind == "embedding":
        layer = nn.Embedding(d[0], d[1])
    elif spec.kind == "cbhg":
        layer = CBHG(d[0], *d[1:])
    else:
        layer = AdditiveAttention(d[0], d[1], d[2])
    init_parameters(layer, seed)
    return layer.to(dtype)


@dataclass
class Cache:
    inputs: Tuple
    output: Tensor
    used: bool = False


def forward(layer: nn.Module, *inputs):
    """Run ``layer`` and keep what ``backward`` needs. Returns (output, cache)."""
    tracked = tuple(x.detach().requires_grad_(True) if torch.is_tensor(x) and x.is_floating_point()
                    else x for x in inputs)
    with torch.enable_grad():
        out = layer(*tracked)
    if isinstance(out, tuple):
        out = out[0]
    return out.detach(), Cache(tracked, out)


def backward(layer: nn.Module, cache: Cache, grad_output: Tensor):
    """Reverse-mode pass. Returns (input grads, {param name: grad})."""
    if cache is None or cache.used:
        raise StaleCacheError("backward needs a fresh cache from forward")
    cache.used = True
    float_inputs = [x for x in cache.inputs if torch.is_tensor(x) and x.requires_grad]
    names, params = zip(*layer.named_parameters()) if any(True for _ in layer.parameters()) else ((), ())
    grads = torch.autograd.grad(cache.output, list(float_inputs) + list(params), grad_output,
                                allow_unused=True)
    zero = lambda g, ref: torch.zeros_like(ref) if g is None else g
    in_grads = [zero(g, x) for g, x in zip(grads[:len(float_inputs)], float_inputs)]
    p_grads = {n: zero(g, p) for n, g, p in zip(names, grads[len(float_inputs):], params)}
    return in_grads, p_grads


def grad_check(layer: nn.Module, inputs: Sequence, eps: float = 1e-4, seed: int = 0,
               loss_fn=None) -> float:
    """Max relative error between analytic and central-difference directional
    derivatives, one random direction per parameter tensor and per float input.

    Runs on a float64 copy of ``layer``. ``loss_fn(output) -> scalar`` defaults to
    a random linear projection of the output.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    import copy
    gen = torch.Generator().manual_seed(seed)
    layer = copy.deepcopy(layer).double()
    inputs = [x.detach().double() if torch.is_tensor(x) and x.is_floating_point() else x for x in inputs]

    def first(out):
        return out[0] if isinstance(out, tuple) else out

    if loss_fn is None:
        with torch.no_grad():
            shape = first(layer(*inputs)).shape
        proj = torch.randn(shape, generator=gen, dtype=torch.float64)
        loss_fn = lambda out: (first(out) * proj).sum()

    params = [p for p in layer.parameters()]
    float_idx = [i for i, x in enumerate(inputs) if torch.is_tensor(x) and x.is_floating_point()]
    leaves = [x.requires_grad_(True) for x in (inputs[i] for i in float_idx)]
    loss = loss_fn(layer(*inputs))
    grads = torch.autograd.grad(loss, params + leaves, allow_unused=True)
    targets = params + leaves
    worst = 0.0
    for target, g in zip(targets, grads):
        if g is None:
            g = torch.zeros_like(target)
        direction = torch.randn(target.shape, generator=gen, dtype=torch.float64)
        analytic = float((g * direction).sum())
        with torch.no_grad():
            orig = target.detach().clone()
            target.copy_(orig + eps * direction)
            plus = float(loss_fn(layer(*inputs)))
            target.copy_(orig - eps * direction)
            minus = float(loss_fn(layer(*inputs)))
            target.copy_(orig)
        numeric = (plus - minus) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# --- optimizer with update exclusion -------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = 1.0
    moments: Dict[str, Tuple[Tensor, Tensor]] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)


def apply_update(params: Mapping[str, Tensor], grads: Mapping[str, Optional[Tensor]],
                 freeze: Iterable[str], opt: AdamState) -> float:
    """Adam step on every parameter outside the frozen groups.

    Frozen tensors and their moment state are never touched. Clipping uses the
    global norm of the trainable gradients only. Returns that norm.
    """
    frozen = freeze_set(freeze)
    live = [n for n in params if group_of(n) not in frozen]
    for n in params:
        g = grads.get(n)
        if g is not None and g.shape != params[n].shape:
            raise ValueError(f"gradient for {n} has shape {tuple(g.shape)}, expected {tuple(params[n].shape)}")
    live_grads = {n: grads[n] for n in live if grads.get(n) is not None}
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in live_grads.values()))
    scale = 1.0
    if opt.grad_clip is not None and norm > opt.grad_clip:
        scale = opt.grad_clip / (norm + 1e-12)
    with torch.no_grad():
        for n, g in live_grads.items():
            p = params[n]
            g = g * scale
            m, v = opt.moments.get(n, (torch.zeros_like(p), torch.zeros_like(p)))
            t = opt.steps.get(n, 0) + 1
            m = opt.beta1 * m + (1 - opt.beta1) * g
            v = opt.beta2 * v + (1 - opt.beta2) * g * g
            m_hat = m / (1 - opt.beta1 ** t)
            v_hat = v / (1 - opt.beta2 ** t)
            p.sub_(opt.lr * m_hat / (v_hat.sqrt() + opt.eps))
            opt.moments[n] = (m, v)
            opt.steps[n] = t
    return norm
