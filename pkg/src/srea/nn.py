"""Network architecture, optimizer, and training-rate rules.

The model is a 1D convolutional autoencoder plus classifier sharing one
embedding: four stride-2 conv blocks (128, 128, 256, 256 filters, kernel 4),
global average pooling and a 1x1 projection to a 32-dimensional embedding; the
decoder mirrors the encoder with transposed convolutions; the classifier is a
128-unit dense block plus an output layer. Per-class cluster centers live in
the embedding space and are trained jointly with the network.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .recordio import read_records, write_records

ENCODER_CHANNELS = (128, 128, 256, 256)
KERNEL = 4
STRIDE = 2
PAD = 1  # keeps conv output lengths at floor(L/2) for K=4, stride=2
CLASSIFIER_HIDDEN = 128
EMBED_DIM = 32


class ArchitectureError(ValueError):
    pass


def lr_at(epoch):
    """Learning rate schedule: 0.01 halved every 20 epochs."""
    return 0.01 * 0.5 ** (epoch // 20)


def batch_size_for(n):
    """min(n/10, 128), floored at one sample."""
    if n < 1:
        raise ValueError(f"dataset size must be positive, got {n}")
    return max(1, min(n // 10, 128))


def _kaiming_uniform(gen, shape, fan_in, dtype=np.float32):
    # framework-default fan-in bound (kaiming uniform with a=sqrt(5))
    bound = np.sqrt(1.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(dtype)


class ConvBlock:
    """conv -> batchnorm -> relu -> dropout."""

    def __init__(self, name, c_in, c_out, gen, dropout_p, transposed=False, out_pad=0):
        self.name = name
        self.transposed = transposed
        self.out_pad = out_pad
        self.dropout_p = dropout_p
        fan_in = c_in * KERNEL
        self.weight = T.Tensor(_kaiming_uniform(gen, (c_out, c_in, KERNEL), fan_in), requires_grad=True)
        self.bias = T.Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.gamma = T.Tensor(np.ones(c_out, dtype=np.float32), requires_grad=True)
        self.beta = T.Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.bn = T.BnState(c_out)

    def forward(self, x, training, dropout_gen):
        # channels-last throughout: x is [B, L, C]
        if self.transposed:
            y = T.tconv1d(x, self.weight, self.bias, stride=STRIDE, padding=PAD,
                          out_pad=self.out_pad, channels_last=True)
        else:
            y = T.conv1d(x, self.weight, self.bias, stride=STRIDE, padding=PAD,
                         channels_last=True)
        y = T.batchnorm1d(y, self.gamma, self.beta, self.bn, training, channels_last=True)
        y = T.relu(y)
        if training and self.dropout_p and dropout_gen is not None:
            y = T.dropout(y, self.dropout_p, dropout_gen, training)
        return y

    def parameters(self, prefix):
        return OrderedDict(
            (
                (f"{prefix}.weight", self.weight),
                (f"{prefix}.bias", self.bias),
                (f"{prefix}.gamma", self.gamma),
                (f"{prefix}.beta", self.beta),
            )
        )


class SreaModel:
    """Encoder, decoder, classifier and cluster centers over one embedding."""

    def __init__(self, input_channels, seq_len, k, d=EMBED_DIM, dropout_p=0.2, rng=None):
        if seq_len < 16:
            raise ArchitectureError(
                f"seq_len={seq_len} is too short for four stride-2 halvings; pad the series to at least 16"
            )
        if k < 2:
            raise ArchitectureError(f"need at least 2 classes, got k={k}")
        self.input_channels = input_channels
        self.seq_len = seq_len
        self.k = k
        self.d = d
        self.dropout_p = dropout_p
        rng = rng if rng is not None else T.Rng(0)
        gen = rng.stream("init")

        lengths = [seq_len]
        for _ in range(4):
            lengths.append(lengths[-1] // 2)
        self.lengths = lengths  # [L, L/2, L/4, L/8, L/16]

        chans = (input_channels,) + ENCODER_CHANNELS
        self.encoder = [
            ConvBlock(f"enc{i + 1}", chans[i], chans[i + 1], gen, dropout_p)
            for i in range(4)
        ]
        self.embed_w = T.Tensor(
            _kaiming_uniform(gen, (d, ENCODER_CHANNELS[-1], 1), ENCODER_CHANNELS[-1]),
            requires_grad=True,
        )
        self.embed_b = T.Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

        dec_chans = (d, 256, 128, 128)
        self.decoder = []
        for i in range(3):
            out_pad = lengths[3 - i] - 2 * lengths[4 - i]
            self.decoder.append(
                ConvBlock(f"dec{i + 1}", dec_chans[i], dec_chans[i + 1], gen, dropout_p,
                          transposed=True, out_pad=out_pad)
            )
        # output layer: plain transposed conv, no norm/activation, so the
        # reconstruction can take negative values
        self.out_pad_last = lengths[0] - 2 * lengths[1]
        fan_in = dec_chans[-1] * KERNEL
        self.dec_out_w = T.Tensor(
            _kaiming_uniform(gen, (input_channels, dec_chans[-1], KERNEL), fan_in),
            requires_grad=True,
        )
        self.dec_out_b = T.Tensor(np.zeros(input_channels, dtype=np.float32), requires_grad=True)

        self.cls_w1 = T.Tensor(_kaiming_uniform(gen, (CLASSIFIER_HIDDEN, d), d), requires_grad=True)
        self.cls_b1 = T.Tensor(np.zeros(CLASSIFIER_HIDDEN, dtype=np.float32), requires_grad=True)
        self.cls_gamma = T.Tensor(np.ones(CLASSIFIER_HIDDEN, dtype=np.float32), requires_grad=True)
        self.cls_beta = T.Tensor(np.zeros(CLASSIFIER_HIDDEN, dtype=np.float32), requires_grad=True)
        self.cls_bn = T.BnState(CLASSIFIER_HIDDEN)
        self.cls_w2 = T.Tensor(_kaiming_uniform(gen, (k, CLASSIFIER_HIDDEN), CLASSIFIER_HIDDEN), requires_grad=True)
        self.cls_b2 = T.Tensor(np.zeros(k, dtype=np.float32), requires_grad=True)

        self.centers = T.Tensor(np.zeros((d, k), dtype=np.float32), requires_grad=True)

    # -- forward passes ----------------------------------------------------

    def encode(self, x, training, dropout_gen=None, channels_last=False):
        """x [B, C, L] (or [B, L, C] with channels_last=True) -> embedding [B, d, 1]."""
        h = x if channels_last else T.transpose(x, (0, 2, 1))
        for block in self.encoder:
            h = block.forward(h, training, dropout_gen)
        pooled = T.global_avg_pool(h, channels_last=True)  # [B, 1, C]
        emb = T.conv1d(pooled, self.embed_w, self.embed_b, channels_last=True)  # [B, 1, d]
        return T.transpose(emb, (0, 2, 1))

    def decode(self, emb, training, dropout_gen=None, channels_last=False):
        """Embedding [B, d, 1] -> reconstruction [B, C, L] ([B, L, C] if channels_last)."""
        h = T.upsample_repeat(T.transpose(emb, (0, 2, 1)), self.lengths[4], axis=1)
        for block in self.decoder:
            h = block.forward(h, training, dropout_gen)
        out = T.tconv1d(h, self.dec_out_w, self.dec_out_b, stride=STRIDE,
                        padding=PAD, out_pad=self.out_pad_last, channels_last=True)
        return out if channels_last else T.transpose(out, (0, 2, 1))

    def classify(self, emb, training, dropout_gen=None):
        flat = T.reshape(emb, (emb.shape[0], self.d)) if emb.data.ndim == 3 else emb
        h = T.dense(flat, self.cls_w1, self.cls_b1)
        h = T.batchnorm1d(
            T.reshape(h, (h.shape[0], 1, CLASSIFIER_HIDDEN)),
            self.cls_gamma, self.cls_beta, self.cls_bn, training, channels_last=True,
        )
        h = T.reshape(h, (h.shape[0], CLASSIFIER_HIDDEN))
        h = T.relu(h)
        if training and self.dropout_p and dropout_gen is not None:
            h = T.dropout(h, self.dropout_p, dropout_gen, training)
        return T.dense(h, self.cls_w2, self.cls_b2)  # logits [B, k]

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        params = OrderedDict()
        for block in self.encoder:
            params.update(block.parameters(f"encoder.{block.name}"))
        params["encoder.embed.weight"] = self.embed_w
        params["encoder.embed.bias"] = self.embed_b
        for block in self.decoder:
            params.update(block.parameters(f"decoder.{block.name}"))
        params["decoder.out.weight"] = self.dec_out_w
        params["decoder.out.bias"] = self.dec_out_b
        params["classifier.dense1.weight"] = self.cls_w1
        params["classifier.dense1.bias"] = self.cls_b1
        params["classifier.dense1.gamma"] = self.cls_gamma
        params["classifier.dense1.beta"] = self.cls_beta
        params["classifier.out.weight"] = self.cls_w2
        params["classifier.out.bias"] = self.cls_b2
        params["centers"] = self.centers
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def bn_states(self):
        states = OrderedDict()
        for block in self.encoder:
            states[f"encoder.{block.name}.bn"] = block.bn
        for block in self.decoder:
            states[f"decoder.{block.name}.bn"] = block.bn
        states["classifier.dense1.bn"] = self.cls_bn
        return states

    def zero_grad(self):
        # grads re-materialize lazily; None reads as zero downstream
        for p in self.parameters():
            p.grad = None


def build_model(input_channels, seq_len, k, d=EMBED_DIM, dropout_p=0.2, rng=None):
    return SreaModel(input_channels, seq_len, k, d=d, dropout_p=dropout_p, rng=rng)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction; weight decay decoupled by default.

    `coupled=True` folds the decay into the gradient instead (classic L2).
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-6, weight_decay=1e-4, coupled=False):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.coupled = coupled
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                if self.coupled:
                    g = g + self.weight_decay * p.data
                else:
                    p.data -= lr * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state, lr):
    """Functional spelling of one optimizer update (grads read in place)."""
    state.step(lr)
    return state


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(model, path):
    records = OrderedDict()
    records["meta.input_channels"] = np.array([model.input_channels], dtype=np.float32)
    records["meta.seq_len"] = np.array([model.seq_len], dtype=np.float32)
    records["meta.k"] = np.array([model.k], dtype=np.float32)
    records["meta.d"] = np.array([model.d], dtype=np.float32)
    records["meta.dropout_p"] = np.array([model.dropout_p], dtype=np.float32)
    for name, p in model.named_parameters().items():
        records[f"param.{name}"] = p.data
    for name, bn in model.bn_states().items():
        records[f"state.{name}.running_mean"] = bn.running_mean
        records[f"state.{name}.running_var"] = bn.running_var
    write_records(path, records)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint written by `save_checkpoint`."""
    records = read_records(path)
    model = SreaModel(
        int(records["meta.input_channels"][0]),
        int(records["meta.seq_len"][0]),
        int(records["meta.k"][0]),
        d=int(records["meta.d"][0]),
        dropout_p=float(records["meta.dropout_p"][0]),
    )
    params = model.named_parameters()
    for name, p in params.items():
        p.data = records[f"param.{name}"].astype(np.float32).reshape(p.data.shape)
    for name, bn in model.bn_states().items():
        bn.running_mean = records[f"state.{name}.running_mean"].astype(np.float32)
        bn.running_var = records[f"state.{name}.running_var"].astype(np.float32)
    return model
