from django.core.management.base import BaseCommand, CommandError

from sparse_ctr.config import PRESETS, load_run_config
from sparse_ctr.exceptions import VALIDATION_ERRORS, ConfigError, CtrError


class CtrCommand(BaseCommand):
    """
    Base de los comandos del motor: opciones de configuración compartidas y
    traducción de errores a códigos de salida (2 validación, 1 ejecución).
    """

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            help='Archivo de configuración clave=valor (p. ej. prune.target_dnn=0.99)'
        )
        parser.add_argument(
            '--set',
            action='append',
            default=[],
            dest='overrides',
            metavar='CLAVE=VALOR',
            help='Sobrescribe una clave de configuración (repetible)'
        )
        parser.add_argument(
            '--preset',
            choices=sorted(PRESETS),
            help='Valores por defecto de un dataset (criteo, avazu)'
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def command_overrides(self, options):
        """Flags propios del comando que pisan claves de configuración"""
        return {}

    def handle(self, *args, **options):
        try:
            run_config = load_run_config(
                path=options['config'],
                overrides=options['overrides'],
                preset=options['preset'],
                extra=self.command_overrides(options),
            )
            self.run(run_config, options)
        except VALIDATION_ERRORS as exc:
            if isinstance(exc, ConfigError):
                for line in exc.errors:
                    self.stderr.write(f'  - {line}')
                message = f'Configuración inválida ({len(exc.errors)} errores)'
            else:
                message = str(exc)
            raise CommandError(message, returncode=2) from exc
        except CtrError as exc:
            raise CommandError(str(exc), returncode=1) from exc

    def run(self, run_config, options):
        raise NotImplementedError
