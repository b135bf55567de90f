# circuitlab/services/probe_service.py - Layer x position probe sweeps over residual-stream states
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from circuitlab.core.config import settings
from circuitlab.core.errors import ProbeError
from circuitlab.models.probe import ProbeWeights, train_probe
from circuitlab.models.transformer import Parameters, run_with_cache
from circuitlab.schemas.config import ProbeConfig
from circuitlab.schemas.dataset import PromptPair
from circuitlab.schemas.report import ProbeCell, ProbeGrid
from circuitlab.services.patching_service import label_map_of
from circuitlab.utils.utils import derive_seed, seed_stream

logger = logging.getLogger(__name__)

STATE_CHUNK = 256

Cell = Tuple[int, str]


def _template_groups(pairs: Sequence[PromptPair]) -> Dict[Tuple, List[int]]:
    groups: Dict[Tuple, List[int]] = {}
    for i, pair in enumerate(pairs):
        groups.setdefault((pair.operation.value, pair.template_id, pair.length), []).append(i)
    return groups


class ProbeService:
    """Linear probes predicting the true arithmetic result from hidden states"""

    @staticmethod
    def split_per_template(
        pairs: Sequence[PromptPair], n_train: int, n_test: int, seed: int
    ) -> Tuple[List[PromptPair], List[PromptPair]]:
        """Up to n_train / n_test pairs of every template, shuffled with a seed stream"""
        train, test = [], []
        for key, indices in sorted(_template_groups(pairs).items()):
            rng = seed_stream(seed, f"probe/split/{key[0]}/{key[1]}")
            order = [indices[i] for i in rng.permutation(len(indices))]
            train.extend(pairs[i] for i in order[:n_train])
            test.extend(pairs[i] for i in order[n_train:n_train + n_test])
        return train, test

    @staticmethod
    def collect_states(
        params: Parameters,
        pairs: Sequence[PromptPair],
        layers: Sequence[int],
        positions: Sequence[str],
        use_clean: bool = True,
    ) -> Tuple[Dict[Cell, np.ndarray], np.ndarray]:
        """Residual vectors per (layer, position label) and the true result of every pair"""
        n_layers = params.config.n_layers
        d_model = params.config.d_model
        states = {(l, p): np.zeros((len(pairs), d_model)) for l in layers for p in positions}
        labels = np.array([int(p.variables["result"]) for p in pairs], dtype=np.int64)
        for indices in _template_groups(pairs).values():
            label_map = label_map_of(pairs[indices[0]])
            missing = [p for p in positions if not label_map.has_label(p)]
            if missing:
                raise ProbeError(
                    f"positions {missing} not defined for template {pairs[indices[0]].template_id}"
                )
            columns = {p: label_map.index_of(p) for p in positions}
            for start in range(0, len(indices), STATE_CHUNK):
                chunk = indices[start:start + STATE_CHUNK]
                tokens = np.array([pairs[i].clean_tokens if use_clean else pairs[i].corrupt_tokens for i in chunk])
                _, cache = run_with_cache(params, tokens)
                for layer in layers:
                    residual = cache.residual(layer, n_layers)
                    for position, column in columns.items():
                        states[(layer, position)][chunk] = residual[:, column]
        return states, labels

    @staticmethod
    def probe_layer_sweep(
        params: Parameters,
        pairs: Sequence[PromptPair],
        positions: Optional[Sequence[str]] = None,
        cfg: Optional[ProbeConfig] = None,
        seed: int = 0,
        n_workers: Optional[int] = None,
    ) -> Tuple[ProbeGrid, Dict[Cell, ProbeWeights]]:
        """One probe per (residual layer, position), trained on a per-template split"""
        cfg = cfg or ProbeConfig()
        positions = list(positions or cfg.positions)
        n_layers = params.config.n_layers
        layers = list(cfg.layers) if cfg.layers is not None else list(range(n_layers + 1))
        for layer in layers:
            if not 0 <= layer <= n_layers:
                raise ProbeError(f"residual layer {layer} outside 0..{n_layers}")

        train, test = ProbeService.split_per_template(pairs, cfg.train_per_template, cfg.test_per_template, seed)
        if not train or not test:
            raise ProbeError(f"need train and test pairs, got {len(train)} / {len(test)}")
        train_states, train_labels = ProbeService.collect_states(params, train, layers, positions)
        test_states, test_labels = ProbeService.collect_states(params, test, layers, positions)

        def fit(cell: Cell) -> ProbeWeights:
            layer, position = cell
            probe = train_probe(
                train_states[cell],
                train_labels,
                lr=cfg.lr,
                epochs=cfg.epochs,
                seed=derive_seed(seed, f"probe/L{layer}/{position}"),
                batch_size=cfg.batch_size,
            )
            probe.layer, probe.position = layer, position
            probe.test_accuracy = probe.accuracy(test_states[cell], test_labels)
            return probe

        cells = [(l, p) for l in layers for p in positions]
        with ThreadPoolExecutor(max_workers=n_workers or settings.N_WORKERS) as executor:
            probes = dict(zip(cells, executor.map(fit, cells)))

        grid = ProbeGrid(
            layers=layers,
            positions=positions,
            cells=[
                ProbeCell(
                    layer=l,
                    position=p,
                    train_accuracy=probes[(l, p)].train_accuracy,
                    test_accuracy=probes[(l, p)].test_accuracy,
                    n_classes=probes[(l, p)].n_classes,
                    n_train=len(train),
                    n_test=len(test),
                )
                for l, p in cells
            ],
        )
        for position in positions:
            logger.info(f"probe {position}: best layer {grid.best_layer(position)}")
        return grid, probes


def probe_layer_sweep(params, pairs, positions=None, cfg=None, seed=0) -> ProbeGrid:
    grid, _ = ProbeService.probe_layer_sweep(params, pairs, positions, cfg, seed)
    return grid
