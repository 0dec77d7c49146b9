#!/usr/bin/env python3
"""Write a synthetic multi-composer MIDI directory for desk-scale runs.

Each "composer" gets its own subdirectory of MIDI files. With --kind styles
the composers play in disjoint pitch registers, which a style classifier can
separate; with --kind motifs they repeat short motif families that share a
register.
"""

import argparse
import sys

import numpy as np

from codecomposer.toy import motif_corpus, style_corpus, write_midi_corpus


def main():
  parser = argparse.ArgumentParser(description="Write a toy MIDI corpus, one subdirectory per composer")
  parser.add_argument("out", help="Directory to write <composer>/<composer>_NNN.mid into")
  parser.add_argument("--kind", choices=["styles", "motifs"], default="styles")
  parser.add_argument("--composers", type=int, default=3)
  parser.add_argument("--segments", type=int, default=20, help="Segments per composer")
  parser.add_argument("--segment-frames", type=int, default=64)
  parser.add_argument("--segments-per-file", type=int, default=4)
  parser.add_argument("--seed", type=int, default=0)
  args = parser.parse_args()

  rng = np.random.default_rng(args.seed)
  try:
    if args.kind == "styles":
      corpus = style_corpus(rng, styles=args.composers, segments_per_style=args.segments,
                            segment_frames=args.segment_frames)
    else:
      corpus = motif_corpus(rng, families=args.composers, segments_per_family=args.segments,
                            segment_frames=args.segment_frames)
  except ValueError as e:
    print(f"✗ {e}", file=sys.stderr)
    sys.exit(2)

  paths = write_midi_corpus(corpus, args.out, segments_per_file=args.segments_per_file)
  for name, count in corpus.label_counts().items():
    print(f"  {name}: {count} segments")
  print(f"✓ Wrote {len(paths)} MIDI files to {args.out}")


if __name__ == "__main__":
  main()
