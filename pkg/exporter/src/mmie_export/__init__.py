"""Feature exporter: runs pretrained text/image encoders offline and writes
MMTF tensor files plus JSONL manifests consumable by the mmie engine."""

__version__ = "0.1.0"


class ExporterError(Exception):
    pass
