from sparse_ctr.checkpoint import load_checkpoint
from sparse_ctr.data import EncodedDataset
from sparse_ctr.exceptions import InputError, ModelMismatchError
from sparse_ctr.metrics import evaluate
from sparse_ctr.reports import EVAL_COLUMNS, write_csv

from ._base import CtrCommand

SPLITS = ('test', 'train', 'all')


def check_dictionary(loaded, dataset, path):
    """Rechaza un checkpoint cuyo diccionario no es el del dataset"""
    if loaded.dictionary_hash != dataset.dictionary_hash:
        raise ModelMismatchError(
            f'{path} fue entrenado con el diccionario {loaded.dictionary_hash[:12] or "(ninguno)"} '
            f'pero el dataset usa {dataset.dictionary_hash[:12]}; vuelva a preprocesar '
            'con el mismo diccionario o use el checkpoint correspondiente'
        )


def select_split(dataset, split):
    if split == 'test':
        part = dataset.test_part()
    elif split == 'train':
        part = dataset.train_part()
    else:
        part = dataset
    if len(part) == 0:
        raise InputError(f'la partición {split} está vacía')
    return part


class Command(CtrCommand):
    help = 'Calcula LogLoss y AUC de un checkpoint (denso o compilado) sobre el dataset'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', help='Checkpoint a evaluar (por defecto paths.checkpoint)')
        parser.add_argument('--dataset', help='Dataset codificado (por defecto paths.dataset)')
        parser.add_argument('--split', choices=SPLITS, default='test', help='Partición a evaluar')
        parser.add_argument('--output', help='CSV con el resultado')

    def command_overrides(self, options):
        return {
            'paths.checkpoint': options['checkpoint'],
            'paths.dataset': options['dataset'],
        }

    def run(self, run_config, options):
        run_config.require_paths(must_exist=['checkpoint', 'dataset'])
        path = run_config['paths.checkpoint']
        loaded = load_checkpoint(path)
        dataset = EncodedDataset.load(run_config['paths.dataset'])
        check_dictionary(loaded, dataset, path)

        result = evaluate(loaded.model, select_split(dataset, options['split']))
        self.stdout.write(f'logloss={result.logloss:.6f}')
        self.stdout.write(f'auc={result.auc:.6f}')
        self.stdout.write(f'n_samples={result.n_samples}')
        if options['output']:
            row = {'checkpoint': path, 'split': options['split'], **result.as_row()}
            write_csv(options['output'], [row], EVAL_COLUMNS, run_config.echo_lines())
        self.stdout.write(self.style.SUCCESS('Evaluación completa'))
