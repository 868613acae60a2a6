import sys

from dotenv import load_dotenv

from cli import routing

load_dotenv()


def main() -> int:
    return routing.run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
