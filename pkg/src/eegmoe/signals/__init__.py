from .filters import design_bandpass, fir_bandpass
from .montage import SUPERSET, GroupTable, Montage, UnknownChannelError
from .synth import (Corpus, EegBatch, SynthParadigmSpec, default_paradigms, generate_corpus,
                    iterate_batches, patch)

__all__ = ["design_bandpass", "fir_bandpass", "SUPERSET", "GroupTable", "Montage", "UnknownChannelError",
           "Corpus", "EegBatch", "SynthParadigmSpec", "default_paradigms", "generate_corpus",
           "iterate_batches", "patch"]
