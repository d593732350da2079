import sys

from src.cli import main

# =============================================================================
# Entry point: `python main.py <command> ...` (see src/cli.py for commands)
#   - .env files are loaded inside cli.main() via python-dotenv
# =============================================================================
if __name__ == "__main__":
    sys.exit(main())
