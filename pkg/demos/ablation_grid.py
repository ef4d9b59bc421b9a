"""All 24 transfer recipes on the standard world, averaged over five seeds (about a minute and a half)."""

import sys

from ifsdlab.standard import format_table, run_ablation

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
results = run_ablation(seeds)
print(format_table(results))
