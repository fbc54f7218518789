from faceshield.cli import main

main()
