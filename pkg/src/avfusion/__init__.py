"""Audio-visual fusion for person identification and verification.

Modules: ``frontend`` (audio features), ``nn`` (numpy network core),
``embeddings`` (per-modality vectors), ``fusion`` (sensor, feature and score
fusion), ``verification`` (WCCN/LDA/GPLDA backend, EER), ``evaluation``
(K-fold experiments and reports) and ``cli``.
"""

__version__ = "0.1.0"
