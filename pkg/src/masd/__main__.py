from masd.cli import main

main()
