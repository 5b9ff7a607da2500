import math

from sparse_ctr.checkpoint import load_checkpoint, save_checkpoint
from sparse_ctr.data import EncodedDataset
from sparse_ctr.exceptions import ConfigError, ModelMismatchError
from sparse_ctr.networks import init_params
from sparse_ctr.pruning import Pruner, sparsity_report
from sparse_ctr.reports import TRAIN_COLUMNS, training_rows, write_csv
from sparse_ctr.training import Trainer

from ._base import CtrCommand


class Command(CtrCommand):
    help = 'Entrena el modelo configurado, con poda opcional, y escribe checkpoint y métricas'

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset codificado (por defecto paths.dataset)')
        parser.add_argument('--checkpoint', help='Salida del checkpoint (por defecto paths.checkpoint)')
        parser.add_argument('--metrics', help='CSV de métricas (por defecto paths.metrics)')
        parser.add_argument('--resume', help='Checkpoint denso desde el cual continuar')

    def command_overrides(self, options):
        return {
            'paths.dataset': options['dataset'],
            'paths.checkpoint': options['checkpoint'],
            'paths.metrics': options['metrics'],
        }

    def run(self, run_config, options):
        run_config.require_paths(must_exist=['dataset'], must_be_set=['checkpoint', 'metrics'])
        train_config = run_config.train_config()
        schedule = run_config.prune_schedule()

        dataset = EncodedDataset.load(run_config['paths.dataset'])
        train_set = dataset.train_part()
        test_set = dataset.test_part()
        if len(train_set) == 0:
            raise ConfigError('data.train_fraction: la partición de entrenamiento está vacía')
        if run_config.schema().n_fields != dataset.n_fields:
            raise ConfigError(
                f'data: el esquema define {run_config.schema().n_fields} campos '
                f'pero el dataset tiene {dataset.n_fields}'
            )

        iterations_per_epoch = math.ceil(len(train_set) / train_config.batch_size)
        pruner = Pruner(schedule, iterations_per_epoch) if schedule.enabled else None
        # El warm-up se suma a las épocas de entrenamiento/poda
        total_epochs = train_config.epochs + (schedule.warmup_epochs if pruner else 0)

        if options['resume']:
            trainer = self._resume(options['resume'], dataset, train_config, pruner)
        else:
            model_config = run_config.model_config(dataset.n_features, dataset.field_offsets)
            params = init_params(model_config, seed=run_config.seed)
            trainer = Trainer(params=params, config=train_config, prune_hook=pruner)

        remaining = max(total_epochs - trainer.epochs_done, 0)
        self.stdout.write(
            f'Entrenando {trainer.params.kind}: {len(train_set)} muestras, '
            f'{remaining} épocas, {iterations_per_epoch} iteraciones por época'
        )
        history = trainer.run(train_set, epochs=remaining, eval_set=test_set if len(test_set) else None)

        echo = run_config.echo_lines()
        save_checkpoint(
            trainer.params,
            run_config['paths.checkpoint'],
            dictionary_hash=dataset.dictionary_hash,
            config_echo=echo,
            adam_state=trainer.adam_state,
            train_state=trainer.state_dict(),
        )
        events = pruner.events if pruner else []
        write_csv(run_config['paths.metrics'], training_rows(history, events), TRAIN_COLUMNS, echo)

        for metrics in history:
            self.stdout.write(
                f'época {metrics.epoch}: train_loss={metrics.train_loss:.6f} '
                f'test_logloss={metrics.test_logloss} test_auc={metrics.test_auc}'
            )
        report = sparsity_report(trainer.params)
        self.stdout.write(
            f's_dnn={report.dnn.sparsity:.4f} s_R={report.field_matrix.sparsity:.4f} '
            f's_emb={report.embeddings.sparsity:.4f}'
        )
        self.stdout.write(self.style.SUCCESS(f'Checkpoint escrito en {run_config["paths.checkpoint"]}'))

    def _resume(self, path, dataset, train_config, pruner):
        loaded = load_checkpoint(path)
        if loaded.is_sparse or loaded.adam_state is None or loaded.train_state is None:
            raise ConfigError(f'--resume: {path} no es un checkpoint denso de entrenamiento')
        if loaded.dictionary_hash and loaded.dictionary_hash != dataset.dictionary_hash:
            raise ModelMismatchError(
                f'el checkpoint {path} se entrenó con otro diccionario '
                f'({loaded.dictionary_hash[:12]} != {dataset.dictionary_hash[:12]})'
            )
        if pruner is not None:
            pruner.adopt(loaded.params)
        self.stdout.write(
            f'Reanudando desde {path}: iteración {loaded.train_state["iteration"]}, '
            f'{loaded.train_state["epochs_done"]} épocas completas'
        )
        return Trainer.resume(loaded.params, train_config, loaded.adam_state, loaded.train_state, pruner)
