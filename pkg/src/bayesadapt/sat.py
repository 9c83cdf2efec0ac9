"""Speaker adaptive training with deterministic per-speaker parameters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from .adapt_det import AdaptMethod, SdParams, make_adaptor, neutral_params
from .network import DivergenceError, LabeledFrames, Network, NetworkConfig, TrainConfig, sgd_epochs
from .numerics import RandomStream


@dataclass
class SatState:
    net: Network
    speaker_params: Dict[str, SdParams]
    history: list


def train_sat(speakers: Sequence[LabeledFrames], net_config: NetworkConfig, method: AdaptMethod,
              cfg: TrainConfig, sd_learning_rate: float, stream: RandomStream) -> SatState:
    """Jointly train SI weights and one SD parameter set per training speaker.

    Batches are drawn exactly as in :func:`~bayesadapt.network.train_si`;
    each batch updates the SI weights (momentum SGD on the frame-mean loss)
    and its speaker's SD parameters (plain SGD on the summed loss) from the
    same backward pass. SD parameters persist across epochs.
    """
    if not speakers:
        raise ValueError("empty training corpus")
    ids = [s.speaker_id for s in speakers]
    if len(set(ids)) != len(ids):
        raise ValueError("speaker ids must be unique")
    net = Network.initialize(net_config, stream)
    method.validate(net)
    params = [neutral_params(method, net) for _ in speakers]

    def adaptor_for(s):
        return make_adaptor(method, params[s])

    def on_batch(s, grads):
        for k in method.layers:
            g = grads.adapt[k]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite SD gradient for speaker {ids[s]}")
            params[s][k] = params[s][k] - sd_learning_rate * g

    history = sgd_epochs(net, speakers, cfg, stream, adaptor_for, on_batch)
    return SatState(net, dict(zip(ids, params)), history)
