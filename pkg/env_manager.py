#!/usr/bin/env python3

import argparse
import logging
import os
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values, set_key

logger = logging.getLogger(__name__)

DEFAULTS = {
    "RELERR_THREADS": "1",
    "RELERR_LOG_LEVEL": "INFO",
    "RELERR_SEED": "2024",
    "RELERR_TOL": "1e-6",
}


class EnvManager:
    """Settings from the process environment, then ``.env``, then built-in defaults."""

    def __init__(self, env_file: str = ".env", template_file: str = ".env.template"):
        self.env_file = Path(env_file)
        self.template_file = Path(template_file)

    def load_env(self) -> Dict[str, str]:
        """Load variables from the .env file."""
        if not self.env_file.exists():
            return {}
        return {key: value for key, value in dotenv_values(self.env_file).items() if value is not None}

    def get_template_vars(self) -> Dict[str, Optional[str]]:
        """Get variables from .env.template with their descriptions."""
        template_vars = {}
        if self.template_file.exists():
            last_comment = None
            for line in self.template_file.read_text().splitlines():
                line = line.strip()
                if line.startswith('#'):
                    last_comment = line[1:].strip()
                elif line:
                    key = line.split('=', 1)[0].strip()
                    template_vars[key] = last_comment
                    last_comment = None
        return template_vars

    def list_vars(self) -> Dict[str, str]:
        """Return every known variable with its effective value and print them."""
        template_vars = self.get_template_vars()
        keys = list(dict.fromkeys(list(DEFAULTS) + list(template_vars)))
        values = {key: self.get_var(key) or "Not set" for key in keys}

        print("\nCurrent Settings:")
        print("-" * 50)
        for key in keys:
            print(f"\n{key}:")
            if template_vars.get(key):
                print(f"Description: {template_vars[key]}")
            print(f"Value: {values[key]}")
        print("\n")
        return values

    def get_var(self, key: str) -> Optional[str]:
        """Get the effective value of a variable; the process environment wins over .env."""
        if key in os.environ:
            return os.environ[key]
        env_vars = self.load_env()
        if key in env_vars:
            return env_vars[key]
        return DEFAULTS.get(key)

    def set_var(self, key: str, value: str) -> None:
        """Set or update a variable in the .env file."""
        if key not in self.get_template_vars() and key not in DEFAULTS:
            logger.warning(f"'{key}' is not defined in {self.template_file}")
        self.env_file.touch(exist_ok=True)
        set_key(str(self.env_file), key, value, quote_mode="never")
        logger.info(f"Updated {key} in {self.env_file}")

    def _typed(self, key: str, cast):
        raw = self.get_var(key)
        try:
            return cast(raw)
        except (TypeError, ValueError):
            raise ValueError(f"{key} has malformed value '{raw}'")

    def threads(self) -> int:
        threads = self._typed("RELERR_THREADS", int)
        if threads == 0 or threads < -1:
            raise ValueError(f"RELERR_THREADS must be positive or -1, got {threads}")
        return threads

    def log_level(self) -> str:
        level = str(self.get_var("RELERR_LOG_LEVEL")).upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"RELERR_LOG_LEVEL has malformed value '{level}'")
        return level

    def seed(self) -> int:
        return self._typed("RELERR_SEED", int)

    def tolerance(self) -> float:
        tol = self._typed("RELERR_TOL", float)
        if not tol > 0:
            raise ValueError(f"RELERR_TOL must be positive, got {tol}")
        return tol


def main():
    parser = argparse.ArgumentParser(description="Manage RELERR_* settings")
    parser.add_argument('action', choices=['list', 'get', 'set'], help='Action to perform')
    parser.add_argument('key', nargs='?', help='Variable name')
    parser.add_argument('value', nargs='?', help='Value to set')

    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    env_manager = EnvManager()

    if args.action == 'list':
        env_manager.list_vars()
    elif args.action == 'get':
        if not args.key:
            parser.error("get requires a key")
        value = env_manager.get_var(args.key)
        if value is not None:
            print(f"{args.key}={value}")
        else:
            print(f"{args.key} is not set")
    elif args.action == 'set':
        if not args.key or args.value is None:
            parser.error("set requires both key and value")
        env_manager.set_var(args.key, args.value)


if __name__ == "__main__":
    main()
