import sys

from prefilter_rerank.cli import main

sys.exit(main())
