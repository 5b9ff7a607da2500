"""Errores del motor CTR. Cada error nombra la fila, el lote o la sección culpable."""


class CtrError(Exception):
    """Error base del motor"""


class InputError(CtrError):
    """Entrada fuera del dominio de la operación"""


class ParseError(InputError):
    """Fila mal formada en el TSV o en el diccionario"""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"fila {row}: {message}"
        super().__init__(message)


class ConfigError(CtrError):
    """Configuración inválida; `errors` lista todos los problemas encontrados"""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))


class ModelMismatchError(CtrError):
    """Índices, diccionario o dimensiones que no corresponden al modelo"""


class ShapeError(ModelMismatchError):
    """Dimensiones incompatibles en un producto matriz-vector"""


class TrainingFault(CtrError):
    """Gradiente no finito durante el entrenamiento"""

    def __init__(self, message, batch_id):
        self.batch_id = batch_id
        super().__init__(f"lote {batch_id}: {message}")


class CheckpointError(CtrError):
    """Checkpoint ilegible: magic, versión, truncado o checksum"""

    def __init__(self, message, section):
        self.section = section
        super().__init__(f"sección '{section}': {message}")


class UndefinedMetricError(CtrError):
    """Métrica no definida para la entrada (p. ej. AUC con una sola clase)"""


# Errores que el CLI reporta como validación (exit code 2)
VALIDATION_ERRORS = (ConfigError, InputError, ModelMismatchError)
