"""Salidas CSV: fila de cabecera siempre presente, precedida por el eco de la configuración."""
import os

import pandas as pd

TRAIN_COLUMNS = [
    'record', 'epoch', 'train_loss', 'test_logloss', 'test_auc', 'wall_seconds',
    'event_k', 's_dnn', 's_R', 's_emb',
]

EVAL_COLUMNS = ['checkpoint', 'split', 'logloss', 'auc', 'n_samples']


def write_csv(path, rows, columns, echo_lines=()):
    """Escritura atómica; las líneas de eco van como comentarios '#'"""
    frame = pd.DataFrame(list(rows), columns=columns)
    tmp_path = f'{path}.tmp'
    with open(tmp_path, 'w', encoding='utf-8', newline='') as fh:
        for line in echo_lines:
            fh.write(f'# {line}\n')
        frame.to_csv(fh, index=False, lineterminator='\n')
    os.replace(tmp_path, path)
    return frame


def training_rows(history, events):
    """Épocas y eventos de poda intercalados por iteración"""
    keyed = [(metrics.iteration, 1, metrics.as_row()) for metrics in history]
    keyed += [(event.iteration, 0, event.as_row()) for event in events]
    keyed.sort(key=lambda item: (item[0], item[1]))
    return [row for _, _, row in keyed]
