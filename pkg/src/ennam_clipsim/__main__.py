from ennam_clipsim.cli import main

main()
