from rpbt.cli import main

main()
