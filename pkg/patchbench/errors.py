"""
Exceptions του patchbench.

Κάθε κλάση κληρονομεί και το builtin που θα πετούσαμε έτσι κι αλλιώς
(ValueError, ConnectionError, RuntimeError), ώστε ο caller να μπορεί
να πιάσει οποιοδήποτε από τα δύο.
"""


class PatchBenchError(Exception):
    """Root όλων των σφαλμάτων του patchbench."""


class InvalidArgumentError(PatchBenchError, ValueError):
    """Λάθος όρισμα (διαστάσεις, κενά σύνολα, εκτός εύρους τιμές)."""


class PatchFormatError(PatchBenchError, ValueError):
    """Χαλασμένο ή ασυνεπές αρχείο patch."""


class AnnotationParseError(PatchBenchError, ValueError):
    """Γραμμή annotation που δεν διαβάζεται."""

    def __init__(self, path, line_no: int, line: str, reason: str = "cannot parse annotation line"):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {reason}: {line.strip()!r}")


class UndefinedMetricError(PatchBenchError, ValueError):
    """Το AP δεν ορίζεται χωρίς ground truth."""


class UndefinedStatisticError(PatchBenchError, ValueError):
    """Λιγότερες από δύο τιμές στο εύρος [1, 254]."""


class ConfigError(PatchBenchError, ValueError):
    """Λάθος run config, registry ή CLI flags."""


class BackendUnavailableError(PatchBenchError, ConnectionError):
    """Το backend ενός detector ή extractor δεν είναι διαθέσιμο."""


class TrainingDivergedError(PatchBenchError, RuntimeError):
    """Μη πεπερασμένο loss κατά το optimization."""
