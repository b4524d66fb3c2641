"""Entry point for socket-transport actor processes."""
import sys

from .transport import worker_main

if __name__ == "__main__":
    host, port, index, config_path = sys.argv[1:5]
    sys.exit(worker_main(host, int(port), int(index), config_path))
