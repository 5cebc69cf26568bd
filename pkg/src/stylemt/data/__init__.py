from .dataset import Dataset, load_dataset, load_records
from .imageio import decode_image, decode_ppm, encode_image, encode_ppm
from .records import (LabelMap, SampleRecord, format_labelmap, format_manifest, harmonized_weather_map,
                      load_labelmap, parse_labelmap, parse_manifest, read_manifest, remap_labels,
                      write_manifest)
from .splits import SplitMix64, SplitReport, SplitSpec, generate_splits, read_id_list, write_id_list
from .synth import SYNTH_TAXONOMY, SynthConfig, SynthDataset, contrast, synth_style_dataset
from .taxonomy import Task, Taxonomy, default_taxonomy, load_taxonomy, parse_taxonomy

__all__ = [
    "Dataset", "LabelMap", "SYNTH_TAXONOMY", "SampleRecord", "SplitMix64", "SplitReport", "SplitSpec",
    "SynthConfig", "SynthDataset", "Task", "Taxonomy", "contrast", "decode_image", "decode_ppm",
    "default_taxonomy", "encode_image", "encode_ppm", "format_labelmap", "format_manifest",
    "generate_splits", "harmonized_weather_map", "load_dataset", "load_labelmap", "load_records",
    "load_taxonomy", "parse_labelmap", "parse_manifest", "parse_taxonomy", "read_id_list",
    "read_manifest", "remap_labels", "synth_style_dataset", "write_id_list", "write_manifest",
]
